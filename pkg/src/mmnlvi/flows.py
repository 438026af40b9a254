"""Sylvester normalizing flows on unconstrained variational blocks.

A layer maps row vectors z (S, D) to

    z' = z + h(z Q R~^T + b) R^T Q^T

with Q (D, M) orthonormal (product of M Householder reflections), R and R~
upper triangular M x M and h = tanh.  det J = prod_i (1 + h'_i r_ii r~_ii).
Diagonals are tanh-bounded (shrunk by DIAG_BOUND so saturation cannot reach 1)
so |r_ii r~_ii| < 1 and the layer is invertible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


DIAG_BOUND = 1.0 - 1e-6


class FlowError(ValueError):
    pass


@dataclass(frozen=True)
class SylvesterLayer:
    """Shape and parameter names of one layer; values live in a parameter dict."""

    prefix: str
    D: int
    M: int

    def __post_init__(self):
        if not 1 <= self.M <= self.D:
            raise FlowError(f"bottleneck M={self.M} must be in [1, D={self.D}]")

    @property
    def n_tri(self) -> int:
        return self.M * (self.M - 1) // 2

    def names(self) -> list[str]:
        return [f"{self.prefix}.{k}" for k in ("hh", "r_diag", "r_off", "rt_diag", "rt_off", "b")]

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """R = 0 makes the layer the identity; R~ and Q are random so R gets gradient."""
        p = self.prefix
        return {
            f"{p}.hh": rng.normal(size=(self.M, self.D)),
            f"{p}.r_diag": np.zeros(self.M),
            f"{p}.r_off": np.zeros(self.n_tri),
            f"{p}.rt_diag": np.ones(self.M),
            f"{p}.rt_off": np.zeros(self.n_tri),
            f"{p}.b": np.zeros(self.M),
        }


def householder_q(tape: Tape, hh: Tensor, D: int, M: int) -> Tensor:
    """First M columns of H_1 ... H_M, H_m = I - 2 v v^T / |v|^2."""
    q = tape.const(np.eye(D)[:, :M])
    for m in range(M - 1, -1, -1):
        v = hh[m].reshape(D, 1)
        v = v / ad.sqrt((v * v).sum())
        q = q - 2.0 * (v @ (v.T @ q))
    return q


def householder_q_np(hh: np.ndarray, M: int | None = None) -> np.ndarray:
    M = hh.shape[0] if M is None else M
    D = hh.shape[1]
    q = np.eye(D)[:, :M]
    for m in range(M - 1, -1, -1):
        v = hh[m] / np.linalg.norm(hh[m])
        q = q - 2.0 * np.outer(v, v @ q)
    return q


def _upper(tape: Tape, diag: Tensor, off: Tensor) -> Tensor:
    return ad.fill_tril(diag, off).T


def layer_forward(tape: Tape, layer: SylvesterLayer, P: dict[str, Tensor], z: Tensor) -> tuple[Tensor, Tensor]:
    """Apply one layer to rows of z (S, D); return (z', logdet (S,))."""
    p = layer.prefix
    if z.shape[-1] != layer.D:
        raise FlowError(f"layer expects D={layer.D}, got input shape {z.shape}")
    q = householder_q(tape, P[f"{p}.hh"], layer.D, layer.M)
    r_d = DIAG_BOUND * ad.tanh(P[f"{p}.r_diag"])
    rt_d = DIAG_BOUND * ad.tanh(P[f"{p}.rt_diag"])
    if np.any(r_d.value * rt_d.value <= -1.0):
        raise FlowError(f"{p}: invertibility condition r_ii r~_ii > -1 violated")
    r = _upper(tape, r_d, P[f"{p}.r_off"])
    rt = _upper(tape, rt_d, P[f"{p}.rt_off"])
    a = z @ q @ rt.T + P[f"{p}.b"]
    h = ad.tanh(a)
    z_new = z + h @ r.T @ q.T
    dh = 1.0 - ad.square(h)
    logdet = ad.log(1.0 + dh * (r_d * rt_d)).sum(axis=-1)
    return z_new, logdet


@dataclass
class FlowStack:
    """Ordered Sylvester layers over a D-dimensional block."""

    prefix: str
    D: int
    depth: int = 4
    M: int | None = None

    def __post_init__(self):
        if self.depth < 0:
            raise FlowError("flow depth must be non-negative")
        self.M = self.D if self.M is None else self.M
        self.layers = [SylvesterLayer(f"{self.prefix}.{i}", self.D, self.M) for i in range(self.depth)]

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self.layers:
            out.update(layer.init_params(rng))
        return out

    def forward(self, tape: Tape, P: dict[str, Tensor], z: Tensor) -> tuple[Tensor, Tensor | None]:
        total = None
        for layer in self.layers:
            z, ld = layer_forward(tape, layer, P, z)
            total = ld if total is None else total + ld
        return z, total

    def check_orthonormal(self, params: dict[str, np.ndarray], tol: float = 1e-10) -> None:
        for layer in self.layers:
            q = householder_q_np(params[f"{layer.prefix}.hh"], layer.M)
            err = np.abs(q.T @ q - np.eye(layer.M)).max()
            if err > tol:
                raise FlowError(f"{layer.prefix}: Q^T Q deviates from identity by {err:.3g}")


def flow_logprob(tape: Tape, stack: FlowStack, P: dict[str, Tensor], z0: Tensor,
                 base_logq: Tensor) -> tuple[Tensor, Tensor]:
    """Push base draws through the stack; log q(z_K) = log q0(z0) - sum of log-dets."""
    z, logdet = stack.forward(tape, P, z0)
    return z, base_logq if logdet is None else base_logq - logdet


def forward_np(stack: FlowStack, params: dict[str, np.ndarray], z0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Numeric pass (no gradients) returning (z, summed logdet)."""
    tape = Tape()
    P = {k: tape.const(v) for k, v in params.items() if k.startswith(stack.prefix + ".")}
    z, ld = stack.forward(tape, P, tape.const(np.atleast_2d(z0)))
    logdet = np.zeros(z.shape[0]) if ld is None else ld.value
    return z.value, logdet


def parse_flow_spec(text: str) -> tuple[str, int]:
    """Parse ``block:sylvester:depth`` (e.g. ``zeta:sylvester:4``)."""
    parts = text.split(":")
    if len(parts) != 3 or parts[1] != "sylvester":
        raise FlowError(f"flow spec {text!r} is not of the form block:sylvester:depth")
    try:
        depth = int(parts[2])
    except ValueError:
        raise FlowError(f"flow depth {parts[2]!r} is not an integer") from None
    if depth < 1:
        raise FlowError("flow depth must be >= 1")
    return parts[0], depth


def fit_with_flow(dataset, prior, config, block: str = "zeta", depth: int = 4, M: int | None = None,
                  **kw):
    """vi.fit with a Sylvester flow attached to q(block)."""
    from dataclasses import replace

    from .vi import fit

    cfg = replace(config, flows={**dict(config.flows), block: (depth, M)})
    return fit(dataset, prior, cfg, **kw)
