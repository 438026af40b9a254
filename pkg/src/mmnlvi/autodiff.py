"""Reverse-mode automatic differentiation on a dynamic tape.

A :class:`Tape` records every operation applied to :class:`Tensor` handles.
Calling :meth:`Tape.backward` on a scalar node walks the tape in reverse and
accumulates vector-Jacobian products into each node. Values are float64
numpy arrays. Elementwise binary ops follow numpy broadcasting; gradients
are summed back to the operand shapes.

Typical use::

    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    y = (x * x).sum()
    grads = tape.backward(y)
    grads[x.id]  # -> array([2., 4.])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class NonDeterministicError(RuntimeError):
    pass


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    attrs: dict = field(default_factory=dict)
    ctx: Any = None
    grad: np.ndarray | None = None


class Tensor:
    """Handle to a node on a tape. Cheap to create; holds no data itself."""

    __slots__ = ("tape", "id")
    __array_priority__ = 1000

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        node = self.tape.nodes[self.id]
        return f"Tensor(id={self.id}, op={node.op}, shape={self.shape})"

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.tape is not self.tape:
                raise ValueError("tensors belong to different tapes")
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return self.tape.record("add", [self, self._lift(other)])

    def __radd__(self, other):
        return self.tape.record("add", [self._lift(other), self])

    def __sub__(self, other):
        return self.tape.record("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return self.tape.record("sub", [self._lift(other), self])

    def __mul__(self, other):
        return self.tape.record("mul", [self, self._lift(other)])

    def __rmul__(self, other):
        return self.tape.record("mul", [self._lift(other), self])

    def __truediv__(self, other):
        return self.tape.record("div", [self, self._lift(other)])

    def __rtruediv__(self, other):
        return self.tape.record("div", [self._lift(other), self])

    def __neg__(self):
        return self.tape.record("neg", [self])

    def __matmul__(self, other):
        return self.tape.record("matmul", [self, self._lift(other)])

    def __rmatmul__(self, other):
        return self.tape.record("matmul", [self._lift(other), self])

    def __getitem__(self, index):
        return self.tape.record("getitem", [self], index=index)

    def sum(self, axis=None, keepdims=False):
        return self.tape.record("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.tape.record("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape.record("reshape", [self], shape=shape)

    @property
    def T(self):
        return self.tape.record("transpose", [self])


# ---------------------------------------------------------------------------
# op implementations: forward(values, attrs) -> (out, ctx)
#                     backward(g, values, out, ctx, attrs) -> grads per input
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _fwd_add(v, attrs):
    _check_broadcast("add", *v)
    return v[0] + v[1], None


def _bwd_add(g, v, out, ctx, attrs):
    return _unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)


def _fwd_sub(v, attrs):
    _check_broadcast("sub", *v)
    return v[0] - v[1], None


def _bwd_sub(g, v, out, ctx, attrs):
    return _unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)


def _fwd_mul(v, attrs):
    _check_broadcast("mul", *v)
    return v[0] * v[1], None


def _bwd_mul(g, v, out, ctx, attrs):
    return _unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)


def _fwd_div(v, attrs):
    _check_broadcast("div", *v)
    return v[0] / v[1], None


def _bwd_div(g, v, out, ctx, attrs):
    ga = g / v[1]
    return _unbroadcast(ga, v[0].shape), _unbroadcast(-ga * out, v[1].shape)


def _fwd_neg(v, attrs):
    return -v[0], None


def _bwd_neg(g, v, out, ctx, attrs):
    return (-g,)


def _fwd_maximum(v, attrs):
    _check_broadcast("maximum", *v)
    return np.maximum(v[0], v[1]), None


def _bwd_maximum(g, v, out, ctx, attrs):
    pick_a = v[0] >= v[1]
    return (_unbroadcast(np.where(pick_a, g, 0.0), v[0].shape),
            _unbroadcast(np.where(pick_a, 0.0, g), v[1].shape))


def _fwd_matmul(v, attrs):
    a, b = v
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    inner_a = a.shape[-1]
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if inner_a != inner_b:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        return a @ b, None
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None


def _bwd_matmul(g, v, out, ctx, attrs):
    a, b = v
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = g2 @ np.swapaxes(b2, -1, -2)
    gb = np.swapaxes(a2, -1, -2) @ g2
    ga = _unbroadcast(ga, a2.shape).reshape(a.shape)
    gb = _unbroadcast(gb, b2.shape).reshape(b.shape)
    return ga, gb


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _fwd_sum(v, attrs):
    return np.sum(v[0], axis=attrs["axis"], keepdims=attrs["keepdims"]), None


def _expand_reduced(g, shape, axis, keepdims):
    if not keepdims:
        for ax in sorted(_norm_axis(axis, len(shape))):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def _bwd_sum(g, v, out, ctx, attrs):
    return (np.array(_expand_reduced(g, v[0].shape, attrs["axis"], attrs["keepdims"])),)


def _fwd_mean(v, attrs):
    return np.mean(v[0], axis=attrs["axis"], keepdims=attrs["keepdims"]), None


def _bwd_mean(g, v, out, ctx, attrs):
    x = v[0]
    count = 1
    for ax in _norm_axis(attrs["axis"], x.ndim):
        count *= x.shape[ax]
    return (_expand_reduced(g, x.shape, attrs["axis"], attrs["keepdims"]) / count,)


def _fwd_exp(v, attrs):
    return np.exp(v[0]), None


def _bwd_exp(g, v, out, ctx, attrs):
    return (g * out,)


def _fwd_log(v, attrs):
    if np.any(v[0] <= 0):
        raise NonFiniteError("log of non-positive value")
    return np.log(v[0]), None


def _bwd_log(g, v, out, ctx, attrs):
    return (g / v[0],)


def _fwd_tanh(v, attrs):
    return np.tanh(v[0]), None


def _bwd_tanh(g, v, out, ctx, attrs):
    return (g * (1.0 - out * out),)


def _fwd_softplus(v, attrs):
    return np.logaddexp(0.0, v[0]), None


def _bwd_softplus(g, v, out, ctx, attrs):
    # sigmoid without overflow
    x = v[0]
    sig = np.exp(-np.logaddexp(0.0, -x))
    return (g * sig,)


def _fwd_square(v, attrs):
    return v[0] * v[0], None


def _bwd_square(g, v, out, ctx, attrs):
    return (2.0 * g * v[0],)


def _fwd_sqrt(v, attrs):
    return np.sqrt(v[0]), None


def _bwd_sqrt(g, v, out, ctx, attrs):
    return (0.5 * g / out,)


def _fwd_logsumexp(v, attrs):
    x = v[0]
    axis = attrs["axis"]
    mask = attrs.get("mask")
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        if not np.all(np.any(mask, axis=axis)):
            raise ValueError("logsumexp: a slice has no available entries")
        xm = np.where(mask, x, -np.inf)
    else:
        xm = x
    m = np.max(xm, axis=axis, keepdims=True)
    e = np.exp(xm - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.log(s) + m
    probs = e / s
    return np.squeeze(out, axis=axis), probs


def _bwd_logsumexp(g, v, out, ctx, attrs):
    return (np.expand_dims(g, attrs["axis"]) * ctx,)


def _fwd_getitem(v, attrs):
    return np.array(v[0][attrs["index"]]), None


def _bwd_getitem(g, v, out, ctx, attrs):
    full = np.zeros_like(v[0])
    np.add.at(full, attrs["index"], g)
    return (full,)


def _fwd_take(v, attrs):
    return np.take(v[0], attrs["indices"], axis=0), None


def _bwd_take(g, v, out, ctx, attrs):
    full = np.zeros_like(v[0])
    np.add.at(full, attrs["indices"], g)
    return (full,)


def _fwd_concat(v, attrs):
    axis = attrs["axis"]
    ref = v[0].shape
    for x in v[1:]:
        if x.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(x.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {x.shape}")
    return np.concatenate(v, axis=axis), [x.shape[axis] for x in v]


def _bwd_concat(g, v, out, ctx, attrs):
    splits = np.cumsum(ctx)[:-1]
    return tuple(np.split(g, splits, axis=attrs["axis"]))


def _fwd_reshape(v, attrs):
    try:
        return v[0].reshape(attrs["shape"]), None
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {v[0].shape} to {attrs['shape']}") from None


def _bwd_reshape(g, v, out, ctx, attrs):
    return (g.reshape(v[0].shape),)


def _fwd_transpose(v, attrs):
    if v[0].ndim < 2:
        raise ShapeError(f"transpose: needs ndim >= 2, got shape {v[0].shape}")
    return np.swapaxes(v[0], -1, -2), None


def _bwd_transpose(g, v, out, ctx, attrs):
    return (np.swapaxes(g, -1, -2),)


def _fwd_conv1d(v, attrs):
    # x: (B, length), single input channel; w: (C, width); b: (C,)
    x, w, b = v
    stride = attrs["stride"]
    width = w.shape[1]
    if x.ndim != 2 or w.ndim != 2 or b.shape != (w.shape[0],):
        raise ShapeError(f"conv1d: bad shapes x={x.shape} w={w.shape} b={b.shape}")
    if x.shape[1] < width:
        raise ShapeError(f"conv1d: input length {x.shape[1]} shorter than kernel {width}")
    n_out = (x.shape[1] - width) // stride + 1
    if stride == width and x.shape[1] == n_out * width:
        windows = x.reshape(x.shape[0], n_out, width)
    else:
        s0, s1 = x.strides
        windows = np.lib.stride_tricks.as_strided(
            x, shape=(x.shape[0], n_out, width), strides=(s0, stride * s1, s1), writeable=False
        )
    return windows @ w.T + b, windows


def _bwd_conv1d(g, v, out, ctx, attrs):
    x, w, b = v
    stride = attrs["stride"]
    width = w.shape[1]
    n_out = g.shape[1]
    windows = ctx
    gw = np.einsum("bpc,bpw->cw", g, windows)
    gb = g.sum(axis=(0, 1))
    gwin = g @ w  # (B, n_out, width)
    gx = np.zeros_like(x)
    if stride == width and x.shape[1] == n_out * width:
        gx = gwin.reshape(x.shape)
    else:
        for k in range(width):
            gx[:, k: k + stride * (n_out - 1) + 1: stride] += gwin[:, :, k]
    return gx, gw, gb


def _fwd_maxpool(v, attrs):
    # x: (B, T, C); mask (B, T) marks real positions
    x = v[0]
    mask = attrs.get("mask")
    if mask is not None:
        if not np.all(mask.any(axis=1)):
            raise ValueError("maxpool: a row has no real positions")
        xm = np.where(mask[:, :, None], x, -np.inf)
    else:
        xm = x
    idx = np.argmax(xm, axis=1)  # (B, C)
    out = np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]
    return out, idx


def _bwd_maxpool(g, v, out, ctx, attrs):
    gx = np.zeros_like(v[0])
    np.put_along_axis(gx, ctx[:, None, :], g[:, None, :], axis=1)
    return (gx,)


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, n_features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(n_features)
        self.running_var = np.ones(n_features)
        self.momentum = momentum
        self.eps = eps
        self.frozen = False


def _fwd_batchnorm(v, attrs):
    x, gamma, beta = v
    state: BatchNormState = attrs["state"]
    if attrs["training"]:
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        if not state.frozen:
            n = x.shape[0]
            unbiased = var * n / (n - 1) if n > 1 else var
            m = state.momentum
            state.running_mean = (1 - m) * state.running_mean + m * mu
            state.running_var = (1 - m) * state.running_var + m * unbiased
    else:
        mu = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std)


def _bwd_batchnorm(g, v, out, ctx, attrs):
    x, gamma, beta = v
    xhat, inv_std = ctx
    ggamma = (g * xhat).sum(axis=0)
    gbeta = g.sum(axis=0)
    gxhat = g * gamma
    if attrs["training"]:
        n = x.shape[0]
        gx = inv_std / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
    else:
        gx = gxhat * inv_std
    return gx, ggamma, gbeta


def _fwd_quadform(v, attrs):
    # rows of x against a shared matrix: x (..., D), A (D, D) -> (...)
    x, a = v
    if a.ndim != 2 or a.shape[0] != a.shape[1] or x.shape[-1] != a.shape[0]:
        raise ShapeError(f"quadform: incompatible shapes {x.shape} and {a.shape}")
    ax = x @ a.T
    return np.sum(x * ax, axis=-1), ax


def _bwd_quadform(g, v, out, ctx, attrs):
    x, a = v
    gx = g[..., None] * (x @ a + ctx)
    xf = x.reshape(-1, x.shape[-1])
    gf = np.reshape(g, -1)
    ga = (xf * gf[:, None]).T @ xf
    return gx, ga


def _fwd_trisolve(v, attrs):
    # solve L X = B for lower-triangular L (..., K, K); B (..., K, M) or (K,) when unbatched
    from scipy.linalg import solve_triangular

    lo, rhs = v
    if lo.ndim < 2 or lo.shape[-1] != lo.shape[-2] or rhs.ndim < 1:
        raise ShapeError(f"trisolve: incompatible shapes {lo.shape} and {rhs.shape}")
    if lo.ndim == 2:
        if rhs.shape[0] != lo.shape[0]:
            raise ShapeError(f"trisolve: incompatible shapes {lo.shape} and {rhs.shape}")
        return solve_triangular(lo, rhs, lower=True), None
    if rhs.shape[:-1] != lo.shape[:-1]:
        raise ShapeError(f"trisolve: incompatible shapes {lo.shape} and {rhs.shape}")
    return np.linalg.solve(np.tril(lo), rhs), None


def _bwd_trisolve(g, v, out, ctx, attrs):
    from scipy.linalg import solve_triangular

    lo, rhs = v
    if lo.ndim > 2:
        grhs = np.linalg.solve(np.swapaxes(np.tril(lo), -1, -2), g)
        return -np.tril(grhs @ np.swapaxes(out, -1, -2)), grhs
    grhs = solve_triangular(lo, g, lower=True, trans="T")
    out2 = out if out.ndim == 2 else out[:, None]
    grhs2 = grhs if grhs.ndim == 2 else grhs[:, None]
    glo = -np.tril(grhs2 @ out2.T)
    return glo, grhs


def _fwd_fill_tril(v, attrs):
    # diag (..., K), off (..., K(K-1)/2) -> lower-triangular (..., K, K)
    diag, off = v
    k = diag.shape[-1]
    if off.shape[-1] != k * (k - 1) // 2 or off.shape[:-1] != diag.shape[:-1]:
        raise ShapeError(f"fill_tril: incompatible shapes {diag.shape} and {off.shape}")
    rows, cols = np.tril_indices(k, -1)
    out = np.zeros(diag.shape[:-1] + (k, k))
    idx = np.arange(k)
    out[..., idx, idx] = diag
    out[..., rows, cols] = off
    return out, (rows, cols)


def _bwd_fill_tril(g, v, out, ctx, attrs):
    rows, cols = ctx
    k = g.shape[-1]
    idx = np.arange(k)
    return g[..., idx, idx], g[..., rows, cols]


_OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (_fwd_add, _bwd_add),
    "sub": (_fwd_sub, _bwd_sub),
    "mul": (_fwd_mul, _bwd_mul),
    "div": (_fwd_div, _bwd_div),
    "neg": (_fwd_neg, _bwd_neg),
    "maximum": (_fwd_maximum, _bwd_maximum),
    "matmul": (_fwd_matmul, _bwd_matmul),
    "sum": (_fwd_sum, _bwd_sum),
    "mean": (_fwd_mean, _bwd_mean),
    "exp": (_fwd_exp, _bwd_exp),
    "log": (_fwd_log, _bwd_log),
    "tanh": (_fwd_tanh, _bwd_tanh),
    "softplus": (_fwd_softplus, _bwd_softplus),
    "square": (_fwd_square, _bwd_square),
    "sqrt": (_fwd_sqrt, _bwd_sqrt),
    "logsumexp": (_fwd_logsumexp, _bwd_logsumexp),
    "getitem": (_fwd_getitem, _bwd_getitem),
    "take": (_fwd_take, _bwd_take),
    "concat": (_fwd_concat, _bwd_concat),
    "reshape": (_fwd_reshape, _bwd_reshape),
    "transpose": (_fwd_transpose, _bwd_transpose),
    "conv1d": (_fwd_conv1d, _bwd_conv1d),
    "maxpool": (_fwd_maxpool, _bwd_maxpool),
    "batchnorm": (_fwd_batchnorm, _bwd_batchnorm),
    "quadform": (_fwd_quadform, _bwd_quadform),
    "trisolve": (_fwd_trisolve, _bwd_trisolve),
    "fill_tril": (_fwd_fill_tril, _bwd_fill_tril),
}

OP_KINDS = frozenset(_OPS)


class Tape:
    """Append-only record of operations; rebuilt for every optimisation step."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: Node) -> Tensor:
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, value, requires_grad: bool = True) -> Tensor:
        arr = np.array(value, dtype=np.float64)
        return self._append(Node("leaf", (), arr, requires_grad))

    def const(self, value) -> Tensor:
        arr = np.asarray(value, dtype=np.float64)
        return self._append(Node("const", (), arr, False))

    def record(self, op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
        try:
            fwd, _ = _OPS[op]
        except KeyError:
            raise ValueError(f"unknown op-kind {op!r}") from None
        for t in inputs:
            if t.tape is not self:
                raise ValueError("input tensor recorded on a different tape")
        ids = tuple(t.id for t in inputs)
        values = [self.nodes[i].value for i in ids]
        out, ctx = fwd(values, attrs)
        out = np.asarray(out, dtype=np.float64)
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{op} produced non-finite values")
        requires_grad = any(self.nodes[i].requires_grad for i in ids)
        return self._append(Node(op, ids, out, requires_grad, attrs, ctx))

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(root)/d(node) into every node; return grads of leaves."""
        root_node = self.nodes[root.id]
        if root_node.value.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root_node.value.shape}")
        for node in self.nodes:
            node.grad = None
        root_node.grad = np.ones_like(root_node.value)
        for i in range(root.id, -1, -1):
            node = self.nodes[i]
            if node.grad is None or not node.inputs or not node.requires_grad:
                continue
            _, bwd = _OPS[node.op]
            values = [self.nodes[j].value for j in node.inputs]
            grads = bwd(node.grad, values, node.value, node.ctx, node.attrs)
            for j, gj in zip(node.inputs, grads):
                parent = self.nodes[j]
                if gj is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(gj, dtype=np.float64)
                else:
                    parent.grad = parent.grad + gj
        out = {}
        for i, node in enumerate(self.nodes):
            if node.op == "leaf" and node.requires_grad:
                out[i] = node.grad if node.grad is not None else np.zeros_like(node.value)
        return out

    def reset(self) -> None:
        """Drop all gradient accumulators, keeping recorded values."""
        for node in self.nodes:
            node.grad = None

    def clear(self) -> None:
        self.nodes.clear()


def record(tape: Tape, op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    return tape.record(op, inputs, **attrs)


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(root)


# -- functional helpers ------------------------------------------------------


def exp(x: Tensor) -> Tensor:
    return x.tape.record("exp", [x])


def log(x: Tensor) -> Tensor:
    return x.tape.record("log", [x])


def tanh(x: Tensor) -> Tensor:
    return x.tape.record("tanh", [x])


def softplus(x: Tensor) -> Tensor:
    return x.tape.record("softplus", [x])


def square(x: Tensor) -> Tensor:
    return x.tape.record("square", [x])


def sqrt(x: Tensor) -> Tensor:
    return x.tape.record("sqrt", [x])


def maximum(a: Tensor, b) -> Tensor:
    return a.tape.record("maximum", [a, a._lift(b)])


def logsumexp(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    return x.tape.record("logsumexp", [x], axis=axis, mask=mask)


def take(x: Tensor, indices) -> Tensor:
    return x.tape.record("take", [x], indices=np.asarray(indices))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return xs[0].tape.record("concat", list(xs), axis=axis)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    return x.tape.record("conv1d", [x, w, b], stride=stride)


def maxpool(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    return x.tape.record("maxpool", [x], mask=None if mask is None else np.asarray(mask, bool))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    return x.tape.record("batchnorm", [x, gamma, beta], state=state, training=training)


def quadform(x: Tensor, a: Tensor) -> Tensor:
    return x.tape.record("quadform", [x, x._lift(a)])


def trisolve(lower: Tensor, rhs: Tensor) -> Tensor:
    return lower.tape.record("trisolve", [lower, lower._lift(rhs)])


def fill_tril(diag: Tensor, off: Tensor) -> Tensor:
    return diag.tape.record("fill_tril", [diag, off])


# -- gradient checking -------------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def _evaluate(fn, arrays: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in arrays.items()}
    root = fn(tape, leaves)
    grads = tape.backward(root)
    return float(root.value), {k: grads[t.id] for k, t in leaves.items()}


def gradcheck(fn, leaves: dict[str, np.ndarray], eps: float = 1e-6, floor: float = 1e-8) -> GradcheckReport:
    """Compare tape gradients with central differences.

    ``fn(tape, leaf_tensors)`` must build a scalar from the named leaves and
    return it. The error for a leaf is normwise,
    ``max|ad - fd| / max(max|ad|, max|fd|, floor)``, so entries whose true
    gradient is ~0 do not turn finite-difference roundoff into huge ratios.
    """
    leaves = {k: np.array(v, dtype=np.float64) for k, v in leaves.items()}
    f0, grads = _evaluate(fn, leaves)
    f1, _ = _evaluate(fn, leaves)
    if f0 != f1:
        raise NonDeterministicError(f"function returned {f0!r} then {f1!r} for identical inputs")
    report = {}
    for name, base in leaves.items():
        fd = np.zeros_like(base)
        flat = fd.reshape(-1)
        for i in range(base.size):
            plus = {k: v.copy() for k, v in leaves.items()}
            minus = {k: v.copy() for k, v in leaves.items()}
            plus[name].reshape(-1)[i] += eps
            minus[name].reshape(-1)[i] -= eps
            fp, _ = _evaluate(fn, plus)
            fm, _ = _evaluate(fn, minus)
            flat[i] = (fp - fm) / (2 * eps)
        ad = grads[name]
        if base.size == 0:
            report[name] = 0.0
            continue
        denom = max(np.max(np.abs(ad)), np.max(np.abs(fd)), floor)
        report[name] = float(np.max(np.abs(ad - fd)) / denom)
    return GradcheckReport(report)
