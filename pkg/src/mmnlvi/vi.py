"""Mean-field stochastic variational inference for the MMNL model.

Blocks: q(alpha), q(zeta) full-covariance Gaussians; q(log tau) and
q(u_psi) diagonal Gaussians pushed through exp and a tanh-based
correlation-Cholesky bijection; q(beta_n) either free per-person Gaussians
(SVI) or produced by an inference network (AVI, AVI2; see amortization).
The ELBO is estimated with reparameterized draws and MC log q throughout.
"""
from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .flows import FlowStack, flow_logprob
from .model import LOG_2PI, ChoiceDataset, PriorConfig, lkj_log_normalizer

SCALE0 = 0.1
METHODS = ("SVI", "AVI", "AVI2")
ZETA_FAMILIES = ("normal", "lognormal")
BLOCK_ORDER = ("alpha", "zeta", "log_tau", "psi")


class FitError(RuntimeError):
    def __init__(self, msg: str, trace=None):
        super().__init__(msg)
        self.trace = trace or []


def softplus_np(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def n_offdiag(k: int) -> int:
    return k * (k - 1) // 2


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(tag,)))


# -- support transforms ------------------------------------------------------


def corr_cholesky(tape: Tape, u: Tensor, K: int) -> tuple[Tensor, Tensor, Tensor]:
    """Map rows u (S, K(K-1)/2) to correlation Cholesky factors.

    w = tanh(u) fills the strict lower triangle; L_ij = w_ij sqrt(prod_{k<j} (1 - w_ik^2)),
    L_ii = sqrt(prod_{k<i} (1 - w_ik^2)).  Returns (L (S,K,K), log diag L (S,K),
    log|d psi_offdiag / d u| (S,)).
    """
    S = u.shape[0]
    zeros = tape.const(np.zeros((S, K)))
    w = ad.tanh(u)
    a = 2.0 * np.log(2.0) + 2.0 * u - 2.0 * ad.softplus(2.0 * u)  # log(1 - tanh(u)^2)
    W = ad.fill_tril(zeros, w)
    A = ad.fill_tril(zeros, a)
    C = A @ tape.const(np.triu(np.ones((K, K)), 1))  # C_ij = sum_{k<j} A_ik
    L = (W + tape.const(np.eye(K))) * ad.exp(0.5 * C)
    idx = np.arange(K)
    logdiag = 0.5 * C[:, idx, idx]
    lower = tape.const(np.tril(np.ones((K, K)), -1))
    logdet = (a.sum(axis=-1) + 0.5 * (C * lower).sum(axis=(-2, -1))
              + logdiag @ tape.const(np.arange(K - 1, -1, -1.0)))
    return L, logdiag, logdet


def corr_cholesky_np(u: np.ndarray, K: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    batch = u.shape[:-1]
    rows, cols = np.tril_indices(K, -1)
    W = np.zeros(batch + (K, K))
    W[..., rows, cols] = np.tanh(u)
    A = np.log1p(-W * W)
    C = A @ np.triu(np.ones((K, K)), 1)
    return (W + np.eye(K)) * np.exp(0.5 * C)


def corr_cholesky_inv_np(L: np.ndarray) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    K = L.shape[-1]
    rows, cols = np.tril_indices(K, -1)
    csum = np.cumsum(L * L, axis=-1) - L * L  # sum_{k<j} L_ik^2
    w = L[..., rows, cols] / np.sqrt(1.0 - csum[..., rows, cols])
    return np.arctanh(w)


def psi_from_chol(L: np.ndarray) -> np.ndarray:
    """L L^T rescaled to an exact unit diagonal."""
    psi = L @ np.swapaxes(L, -1, -2)
    d = np.sqrt(np.diagonal(psi, axis1=-2, axis2=-1))
    psi = psi / d[..., :, None] / d[..., None, :]
    idx = np.arange(L.shape[-1])
    psi[..., idx, idx] = 1.0
    return psi


@dataclass
class SupportTransform:
    kind: str  # identity | exp | corr-cholesky
    K: int = 0
    last_logdet: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("identity", "exp", "corr-cholesky"):
            raise ValueError(f"unknown transform {self.kind!r}")

    def forward(self, tape: Tape, z: Tensor):
        """Return (value, logdet (S,)); corr-cholesky returns (L, logdiag) as value."""
        if self.kind == "identity":
            out, ld = z, tape.const(np.zeros(z.shape[0]))
        elif self.kind == "exp":
            out, ld = ad.exp(z), z.sum(axis=-1)
        else:
            L, logdiag, ld = corr_cholesky(tape, z, self.K)
            out = (L, logdiag)
        self.last_logdet = ld.value.copy()
        return out, ld

    def forward_np(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return np.array(z, dtype=float)
        if self.kind == "exp":
            return np.exp(z)
        return psi_from_chol(corr_cholesky_np(z, self.K))

    def inverse_np(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return np.array(x, dtype=float)
        if self.kind == "exp":
            return np.log(x)
        return corr_cholesky_inv_np(np.linalg.cholesky(x))


# -- Gaussian blocks ---------------------------------------------------------


@dataclass(frozen=True)
class GaussianBlock:
    """q(z) = N(mean, L L^T), L = tril(off) + diag(softplus(scale))."""

    name: str
    dim: int
    full: bool = True

    def keys(self) -> list[str]:
        ks = [f"{self.name}.mean", f"{self.name}.scale"]
        return ks + ([f"{self.name}.off"] if self.full else [])

    def init_params(self) -> dict[str, np.ndarray]:
        out = {f"{self.name}.mean": np.zeros(self.dim),
               f"{self.name}.scale": np.full(self.dim, inv_softplus(SCALE0))}
        if self.full:
            out[f"{self.name}.off"] = np.zeros(n_offdiag(self.dim))
        return out

    def chol_np(self, params) -> np.ndarray:
        d = softplus_np(params[f"{self.name}.scale"])
        L = np.diag(d)
        if self.full:
            L[np.tril_indices(self.dim, -1)] = params[f"{self.name}.off"]
        return L

    def sample(self, tape: Tape, P: dict[str, Tensor], eps: np.ndarray) -> tuple[Tensor, Tensor]:
        """z = mean + L eps for rows of eps (S, D); log q(z) at each row."""
        mean = P[f"{self.name}.mean"]
        scale = ad.softplus(P[f"{self.name}.scale"])
        e = tape.const(eps)
        if self.full:
            L = ad.fill_tril(scale, P[f"{self.name}.off"])
            z = mean + e @ L.T
        else:
            z = mean + e * scale
        const = -0.5 * np.sum(eps * eps, axis=-1) - 0.5 * self.dim * LOG_2PI
        logq = tape.const(const) - ad.log(scale).sum()
        return z, logq


def sample_block(block: GaussianBlock, transform: SupportTransform, params: dict, rng,
                 S: int = 1, eps: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Draw S values of transform(mean + L eps) and their log q (constrained space)."""
    tape = Tape()
    P = {k: tape.const(params[k]) for k in block.keys()}
    eps = rng.standard_normal((S, block.dim)) if eps is None else np.atleast_2d(eps)
    z, lq = block.sample(tape, P, eps)
    val, ld = transform.forward(tape, z)
    if isinstance(val, tuple):
        val = val[0]
    return val.value, (lq - ld).value


# -- data views --------------------------------------------------------------


@dataclass
class Batch:
    idx: np.ndarray
    xf: np.ndarray  # (B*T*J, L)
    xr: np.ndarray  # (B, T*J, K)
    lse_mask: np.ndarray  # (B, T, J); padding menus fully available
    onehot: np.ndarray  # (B, T, J)
    menu_mask: np.ndarray  # (B, T) float
    enc: np.ndarray | None = None  # (B, T*E)
    enc_mask: np.ndarray | None = None  # (B, T) bool

    @property
    def size(self) -> int:
        return self.idx.shape[0]


class DataArrays:
    """Precomputed per-person arrays for fast batching."""

    def __init__(self, ds: ChoiceDataset, with_encoding: bool = False):
        self.ds = ds
        N, T, J, K, L = ds.N, ds.T, ds.J, ds.K, ds.L
        self.shape = (N, T, J, K, L)
        mask = ds.menu_mask
        self.xf = ds.xf
        self.xr = ds.xr.reshape(N, T * J, K)
        self.lse_mask = ds.avail | ~mask[..., None]
        self.onehot = ((ds.choice[..., None] == np.arange(J)) & mask[..., None]).astype(float)
        self.menu_mask = mask.astype(float)
        self.mask = mask
        self.enc = None
        if with_encoding:
            from .amortization import encode_menus

            self.enc = encode_menus(ds)

    @property
    def N(self) -> int:
        return self.shape[0]

    def batch(self, idx=None) -> Batch:
        N, T, J, K, L = self.shape
        idx = np.arange(N) if idx is None else np.asarray(idx)
        B = idx.shape[0]
        return Batch(idx, self.xf[idx].reshape(B * T * J, L), self.xr[idx], self.lse_mask[idx],
                     self.onehot[idx], self.menu_mask[idx],
                     None if self.enc is None else self.enc[idx], self.mask[idx])


# -- local posteriors --------------------------------------------------------


class SviLocal:
    """Free per-person Gaussian q(beta_n) with full Cholesky factors."""

    kind = "SVI"

    def __init__(self, N: int, K: int):
        self.N, self.K = N, K

    def init_params(self, rng) -> dict[str, np.ndarray]:
        N, K = self.N, self.K
        return {"beta.mean": np.zeros((N, K)),
                "beta.scale": np.full((N, K), inv_softplus(SCALE0)),
                "beta.off": np.zeros((N, n_offdiag(K)))}

    def posterior(self, tape: Tape, P, batch: Batch, training: bool = True):
        mean = ad.take(P["beta.mean"], batch.idx)
        scale = ad.softplus(ad.take(P["beta.scale"], batch.idx))
        chol = ad.fill_tril(scale, ad.take(P["beta.off"], batch.idx))
        return mean, chol, ad.log(scale)

    def posterior_np(self, params, arrays: DataArrays | None = None, idx=None):
        idx = np.arange(self.N) if idx is None else np.asarray(idx)
        K = self.K
        chol = np.zeros((idx.size, K, K))
        chol[:, np.arange(K), np.arange(K)] = softplus_np(params["beta.scale"][idx])
        r, c = np.tril_indices(K, -1)
        chol[:, r, c] = params["beta.off"][idx]
        return params["beta.mean"][idx].copy(), chol

    def finalize(self, params) -> None:
        pass


# -- variational state -------------------------------------------------------


class VariationalState:
    def __init__(self, L: int, K: int, N: int, method: str = "SVI", zeta_family: str = "normal",
                 flows: dict | None = None, seed: int = 0, local=None):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        if zeta_family not in ZETA_FAMILIES:
            raise ValueError(f"unknown zeta family {zeta_family!r}")
        self.L, self.K, self.N, self.method = L, K, N, method
        self.zeta_family = zeta_family
        self.blocks = {
            "alpha": GaussianBlock("alpha", L, True),
            "zeta": GaussianBlock("zeta", K, True),
            "log_tau": GaussianBlock("log_tau", K, False),
            "psi": GaussianBlock("psi", n_offdiag(K), False),
        }
        self.transforms = {
            "alpha": SupportTransform("identity"),
            "zeta": SupportTransform("exp" if zeta_family == "lognormal" else "identity"),
            "log_tau": SupportTransform("exp"),
            "psi": SupportTransform("corr-cholesky", K),
        }
        self.flows: dict[str, FlowStack] = {}
        for name, spec in (flows or {}).items():
            if name not in self.blocks or self.blocks[name].dim == 0:
                raise ValueError(f"cannot attach a flow to block {name!r}")
            depth, M = spec if isinstance(spec, (tuple, list)) else (spec, None)
            self.flows[name] = FlowStack(f"flow.{name}", self.blocks[name].dim, int(depth), M)
        self.local = SviLocal(N, K) if local is None else local
        self.params: dict[str, np.ndarray] = {}
        for name in BLOCK_ORDER:
            if self.blocks[name].dim:
                self.params.update(self.blocks[name].init_params())
        for i, name in enumerate(sorted(self.flows)):
            self.params.update(self.flows[name].init_params(_stream(seed, 10 + i)))
        self.params.update(self.local.init_params(_stream(seed, 1)))

    @property
    def active_blocks(self) -> list[str]:
        return [n for n in BLOCK_ORDER if self.blocks[n].dim]

    def n_learnable(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def n_global_learnable(self) -> int:
        return int(sum(v.size for k, v in self.params.items() if not k.startswith(("beta.", "net."))))

    def snapshot(self) -> "VariationalState":
        return copy.deepcopy(self)


def draw_noise(state: VariationalState, B: int, S: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {name: rng.standard_normal((S, state.blocks[name].dim)) for name in state.active_blocks}
    out["beta"] = rng.standard_normal((S, B, state.K))
    return out


# -- ELBO --------------------------------------------------------------------


def _mvn_prior(tape: Tape, x: Tensor, mean: np.ndarray, cov: np.ndarray) -> Tensor:
    d = mean.shape[0]
    prec = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    return -0.5 * ad.quadform(x - tape.const(mean), tape.const(prec)) - 0.5 * (logdet + d * LOG_2PI)


def sample_globals(tape: Tape, P, state: VariationalState, noise, prior: PriorConfig | None = None):
    """Constrained global draws with log q (and log prior when ``prior`` given), all per sample."""
    S = noise["zeta"].shape[0]
    K = state.K
    logq = tape.const(np.zeros(S))
    logp = tape.const(np.zeros(S))
    out = {}
    for name in state.active_blocks:
        z, lq = state.blocks[name].sample(tape, P, noise[name])
        if name in state.flows:
            z, lq = flow_logprob(tape, state.flows[name], P, z, lq)
        val, ld = state.transforms[name].forward(tape, z)
        logq = logq + lq - ld
        out[name] = val
        out[name + ".raw"] = z
    if "alpha" in out and prior is not None:
        logp = logp + _mvn_prior(tape, out["alpha"], prior.lambda0, prior.xi0)
    if prior is not None:
        logp = logp + _mvn_prior(tape, out["zeta"], prior.mu0, prior.sigma0_cov)
        s0 = np.broadcast_to(np.asarray(prior.sigma0, float), (K,))
        tau_s = out["log_tau"] / tape.const(s0)
        logp = logp + (np.sum(np.log(2.0 / (np.pi * s0))) - ad.log(1.0 + ad.square(tau_s)).sum(axis=-1))
    if K > 1:
        lpsi, logdiag = out["psi"]
        if prior is not None:
            logp = logp + (2.0 * (prior.nu - 1.0) * logdiag.sum(axis=-1) - lkj_log_normalizer(K, prior.nu))
    else:
        lpsi = tape.const(np.ones((S, 1, 1)))
        logdiag = tape.const(np.zeros((S, 1)))
    tau = out["log_tau"]
    out["tau"] = tau
    out["chol_psi"] = lpsi
    out["chol_omega"] = tau.reshape(S, K, 1) * lpsi
    out["logdiag_omega"] = out["log_tau.raw"] + logdiag
    return out, logp, logq


def elbo_terms(tape: Tape, P, state: VariationalState, batch: Batch, noise, prior: PriorConfig,
               N_total: int | None = None, scale: float | None = None, training: bool = True) -> dict:
    """Per-sample log-joint and log-q tensors plus the scalar ELBO.

    Person terms are scaled by N / |batch| (or ``scale``); global terms are not.
    """
    if batch.size == 0:
        raise ValueError("empty batch")
    N_total = state.N if N_total is None else N_total
    scale = N_total / batch.size if scale is None else scale
    g, logp_g, logq_g = sample_globals(tape, P, state, noise, prior)
    K = state.K
    eps = noise["beta"]
    S, B = eps.shape[0], eps.shape[1]
    if B != batch.size:
        raise ValueError(f"noise for {B} persons but batch has {batch.size}")
    mean, chol, logdiag = state.local.posterior(tape, P, batch, training)
    if chol.ndim == 3:
        beta = mean + (chol @ tape.const(eps[..., None])).reshape(S, B, K)
        lq_diag = logdiag.sum()
    else:
        beta = mean + tape.const(eps) @ chol.T
        lq_diag = B * logdiag.sum()
    logq_b = tape.const(-0.5 * np.sum(eps * eps, axis=(1, 2)) - 0.5 * B * K * LOG_2PI) - lq_diag
    # beta prior N(zeta, Omega)
    diff = beta - g["zeta"].reshape(S, 1, K)
    x = ad.trisolve(g["chol_omega"], diff.T)
    logp_b = (-0.5 * ad.square(x).sum(axis=(1, 2)) - B * g["logdiag_omega"].sum(axis=-1)
              - 0.5 * B * K * LOG_2PI)
    # likelihood
    T, J = batch.onehot.shape[1], batch.onehot.shape[2]
    v = (tape.const(batch.xr) @ beta.reshape(S, B, K, 1)).reshape(S, B, T, J)
    if "alpha" in g:
        v = v + (tape.const(batch.xf) @ g["alpha"].T).T.reshape(S, B, T, J)
    lse = ad.logsumexp(v, axis=-1, mask=batch.lse_mask)
    chosen = (v * tape.const(batch.onehot)).sum(axis=-1)
    ll = ((chosen - lse) * tape.const(batch.menu_mask)).sum(axis=(1, 2))
    log_joint = logp_g + scale * (ll + logp_b)
    log_q = logq_g + scale * logq_b
    elbo = (log_joint - log_q).mean()
    return {"elbo": elbo, "log_joint": log_joint, "log_q": log_q, "loglik": ll, "globals": g,
            "beta": beta}


def elbo_estimate(state: VariationalState, data: DataArrays | ChoiceDataset, prior: PriorConfig,
                  rng: np.random.Generator, S: int = 1, idx=None, scale: float | None = None,
                  params: dict | None = None) -> float:
    """Numeric ELBO estimate (no gradients) on a batch of persons."""
    arrays = data if isinstance(data, DataArrays) else DataArrays(
        data, with_encoding=state.local.kind != "SVI")
    batch = arrays.batch(idx)
    noise = draw_noise(state, batch.size, S, rng)
    tape = Tape()
    params = state.params if params is None else params
    P = {k: tape.const(v) for k, v in params.items()}
    return float(elbo_terms(tape, P, state, batch, noise, prior, arrays.N, scale, training=False)["elbo"].value)


# -- optimizer ---------------------------------------------------------------


class Adam:
    def __init__(self, lr: float = 0.01, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], ascend: bool = True) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        sign = 1.0 if ascend else -1.0
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] = params[k] + sign * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- configuration and reports ----------------------------------------------


@dataclass
class FitConfig:
    method: str = "SVI"
    batch_size: int | None = None  # None: min(N, 2000)
    n_samples: int = 1
    lr: float = 0.01
    lr_final: float | None = None  # geometric decay from lr to lr_final ...
    decay_start: float = 0.0  # ... beginning at this fraction of max_epochs
    max_epochs: int = 3000
    patience: int = 20
    rel_tol: float = 1e-4
    seed: int = 0
    zeta_family: str = "normal"
    flows: dict = field(default_factory=dict)
    conv_filters: int = 32
    hidden: int = 64
    n_summary_draws: int = 1000
    record_timing: bool = True

    def validate(self, N: int) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.batch_size is not None and not 1 <= self.batch_size <= N:
            raise ValueError(f"batch size {self.batch_size} must be in [1, N={N}]")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.lr_final is not None and self.lr_final <= 0:
            raise ValueError("lr_final must be positive")
        if not 0.0 <= self.decay_start <= 1.0:
            raise ValueError("decay_start must be a fraction in [0, 1]")
        if self.lr <= 0 or self.max_epochs < 0 or self.patience < 1 or self.rel_tol < 0:
            raise ValueError("lr > 0, max_epochs >= 0, patience >= 1 and rel_tol >= 0 required")
        if self.zeta_family not in ZETA_FAMILIES:
            raise ValueError(f"unknown zeta family {self.zeta_family!r}")

    def effective_batch(self, N: int) -> int:
        return min(N, 2000) if self.batch_size is None else self.batch_size


@dataclass
class PosteriorSummary:
    means: dict[str, np.ndarray]
    sds: dict[str, np.ndarray]
    draws: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    beta_chol: np.ndarray | None = field(repr=False, default=None)

    def draw_betas(self, n_draws: int, rng: np.random.Generator) -> np.ndarray:
        """(n_draws, N, K) draws from the Gaussian q(beta_n)."""
        eps = rng.standard_normal((n_draws,) + self.means["beta"].shape)
        return self.means["beta"] + np.einsum("nkl,snl->snk", self.beta_chol, eps)


@dataclass
class FitReport:
    method: str
    trace: list  # rows (epoch, elbo, wall_ms)
    wall_time: float
    n_epochs: int
    converged: bool
    n_learnable: int
    config: dict
    summary: PosteriorSummary | None = None
    metrics: dict = field(default_factory=dict)
    state: object = field(default=None, repr=False)

    def estimates(self) -> dict[str, np.ndarray]:
        m = self.summary.means
        return {k: m[k] for k in ("alpha", "zeta", "tau", "psi", "omega", "beta")}

    def to_dict(self) -> dict:
        summ = None
        if self.summary is not None:
            summ = {"means": {k: np.asarray(v).tolist() for k, v in self.summary.means.items()},
                    "sds": {k: np.asarray(v).tolist() for k, v in self.summary.sds.items()}}
        return {"format": "mmnlvi-fit-report/1", "method": self.method, "n_epochs": self.n_epochs,
                "converged": self.converged, "wall_time_s": self.wall_time,
                "n_learnable": self.n_learnable, "config": self.config, "metrics": self.metrics,
                "trace": [{"epoch": int(e), "elbo": float(v), "wall_ms": float(w)} for e, v, w in self.trace],
                "summary": summ}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "FitReport":
        d = json.loads(Path(path).read_text())
        summ = None
        if d.get("summary"):
            summ = PosteriorSummary({k: np.asarray(v) for k, v in d["summary"]["means"].items()},
                                    {k: np.asarray(v) for k, v in d["summary"]["sds"].items()})
        trace = [(r["epoch"], r["elbo"], r["wall_ms"]) for r in d["trace"]]
        return cls(d["method"], trace, d["wall_time_s"], d["n_epochs"], d["converged"], d["n_learnable"],
                   d["config"], summ, d.get("metrics", {}))


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    d["flows"] = {k: list(v) if isinstance(v, (tuple, list)) else [v, None] for k, v in cfg.flows.items()} \
        if hasattr(cfg, "flows") else None
    return {k: v for k, v in d.items() if v is not None}


# -- fitting -----------------------------------------------------------------


def decayed_lr(config: FitConfig, epoch: int) -> float:
    start = config.decay_start * config.max_epochs
    frac = max(0.0, (epoch - 1 - start) / max(1.0, config.max_epochs - 1 - start))
    return config.lr * (config.lr_final / config.lr) ** min(1.0, frac)


def build_state(dataset: ChoiceDataset, config: FitConfig) -> VariationalState:
    local = None
    if config.method in ("AVI", "AVI2"):
        from .amortization import InferenceNetwork

        local = InferenceNetwork(dataset.J, dataset.K, dataset.L, config.conv_filters, config.hidden,
                         variant=config.method)
    return VariationalState(dataset.L, dataset.K, dataset.N, config.method, config.zeta_family,
                            config.flows, config.seed, local)


def fit(dataset: ChoiceDataset, prior: PriorConfig, config: FitConfig,
        monitor: Callable[[int, VariationalState], None] | None = None,
        state: VariationalState | None = None) -> FitReport:
    """Adam on the reparameterized ELBO until patience runs out or max_epochs."""
    config.validate(dataset.N)
    state = build_state(dataset, config) if state is None else state
    arrays = DataArrays(dataset, with_encoding=state.local.kind != "SVI")
    N = dataset.N
    B = config.effective_batch(N)
    noise_rng = _stream(config.seed, 2)
    perm_rng = _stream(config.seed, 3)
    opt = Adam(config.lr)
    trace: list = []
    best, stale, bad = -np.inf, 0, 0
    converged = False
    t0 = time.perf_counter()
    full = arrays.batch() if B == N else None
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        if config.lr_final is not None:
            opt.lr = decayed_lr(config, epoch)
        order = np.arange(N) if B == N else perm_rng.permutation(N)
        vals = []
        for start in range(0, N, B):
            batch = full if full is not None else arrays.batch(np.sort(order[start:start + B]))
            noise = draw_noise(state, batch.size, config.n_samples, noise_rng)
            tape = Tape(check_finite=False)
            P = {k: tape.leaf(v) for k, v in state.params.items()}
            try:
                with np.errstate(all="ignore"):
                    elbo = elbo_terms(tape, P, state, batch, noise, prior, N)["elbo"]
                    grads = tape.backward(elbo) if np.isfinite(elbo.value) else None
                if grads is None:
                    raise NonFiniteError("non-finite ELBO")
                gd = {k: grads[t.id] for k, t in P.items()}
                if not all(np.all(np.isfinite(g)) for g in gd.values()):
                    raise NonFiniteError("non-finite gradient")
            except NonFiniteError:
                bad += 1
                if bad >= 2:
                    raise FitError(f"ELBO non-finite twice in a row at epoch {epoch}", trace)
                continue
            bad = 0
            opt.step(state.params, gd)
            vals.append(float(elbo.value))
        if not vals:
            continue
        mean_elbo = float(np.mean(vals))
        wall = (time.perf_counter() - t0) * 1000.0 if config.record_timing else 0.0
        trace.append((epoch, mean_elbo, wall))
        if monitor is not None:
            monitor(epoch, state)
        if not np.isfinite(best) or mean_elbo > best + config.rel_tol * abs(best):
            best, stale = mean_elbo, 0
        else:
            stale += 1
            if stale >= config.patience:
                converged = True
                break
    state.local.finalize(state.params)
    wall_time = time.perf_counter() - t0 if config.record_timing else 0.0
    summary = posterior_summary(state, arrays, config.n_summary_draws, seed=config.seed)
    return FitReport(config.method, trace, wall_time, len(trace), converged, state.n_learnable(),
                     config_dict(config), summary, state=state)


# -- summaries ---------------------------------------------------------------


def global_draws(state: VariationalState, n_draws: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    noise = {name: rng.standard_normal((n_draws, state.blocks[name].dim)) for name in state.active_blocks}
    tape = Tape()
    P = {k: tape.const(v) for k, v in state.params.items() if not k.startswith(("beta.", "net."))}
    g, _, _ = sample_globals(tape, P, state, noise)
    K = state.K
    out = {"zeta": g["zeta"].value, "tau": g["tau"].value}
    out["alpha"] = g["alpha"].value if "alpha" in g else np.zeros((n_draws, 0))
    lpsi = g["chol_psi"].value
    psi = psi_from_chol(lpsi) if K > 1 else np.ones((n_draws, 1, 1))
    out["psi"] = psi
    out["omega"] = out["tau"][:, :, None] * psi * out["tau"][:, None, :]
    return out


def posterior_summary(state: VariationalState, data: DataArrays | ChoiceDataset | None = None,
                      n_draws: int = 1000, seed: int = 0) -> PosteriorSummary:
    """MC summaries of the globals (10^3 draws by default) and Gaussian moments of q(beta_n)."""
    rng = _stream(seed, 4)
    draws = global_draws(state, n_draws, rng)
    means = {k: v.mean(axis=0) for k, v in draws.items()}
    sds = {k: v.std(axis=0) for k, v in draws.items()}
    if data is not None:
        arrays = data if isinstance(data, DataArrays) else DataArrays(
            data, with_encoding=state.local.kind != "SVI")
        mean, chol = state.local.posterior_np(state.params, arrays)
        means["beta"] = mean
        sds["beta"] = np.sqrt(np.einsum("nkl,nkl->nk", chol, chol))
    else:
        chol = None
    return PosteriorSummary(means, sds, draws, chol)
