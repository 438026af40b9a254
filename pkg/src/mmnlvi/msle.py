"""Maximum simulated likelihood baseline for (alpha, zeta, Omega) with conditional betas."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm, qmc

from . import autodiff as ad
from .autodiff import Tape
from .model import ChoiceDataset
from .vi import Adam, DataArrays, FitReport, PosteriorSummary, inv_softplus, n_offdiag, softplus_np

SCHEMES = ("halton", "pseudo")


class MsleError(RuntimeError):
    def __init__(self, msg: str, trace=None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass
class MsleConfig:
    n_draws: int = 100
    scheme: str = "halton"
    lr: float = 0.05
    max_iter: int = 2000
    rel_tol: float = 1e-6
    window: int = 10  # accepted iterations over which rel_tol is measured
    lr_growth: float = 1.1  # after an accepted step, lr recovers towards its initial value
    seed: int = 0
    n_cond_draws: int = 1000
    record_timing: bool = True

    def validate(self) -> None:
        if self.n_draws < 1 or self.n_cond_draws < 1:
            raise ValueError("need at least one draw per person")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown draw scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.lr <= 0 or self.max_iter < 0 or self.rel_tol < 0 or self.window < 1 or self.lr_growth < 1:
            raise ValueError("lr > 0, max_iter >= 0, rel_tol >= 0, window >= 1 and lr_growth >= 1 required")


@dataclass
class MsleEstimate:
    alpha: np.ndarray
    zeta: np.ndarray
    omega_chol: np.ndarray
    betas: np.ndarray | None = None

    @property
    def omega(self) -> np.ndarray:
        return self.omega_chol @ self.omega_chol.T

    @property
    def tau(self) -> np.ndarray:
        return np.sqrt(np.diag(self.omega))


def make_draws(N: int, R: int, K: int, scheme: str = "halton", seed: int = 0) -> np.ndarray:
    """(N, R, K) standard-normal draws; consecutive Halton blocks go to successive persons."""
    if R < 1:
        raise ValueError("need at least one draw per person")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    if scheme == "pseudo":
        return rng.standard_normal((N, R, K))
    if scheme != "halton":
        raise ValueError(f"unknown draw scheme {scheme!r}")
    u = qmc.Halton(d=K, scramble=True, seed=rng).random(N * R)
    u = np.clip(u, 1e-12, 1 - 1e-12)
    return norm.ppf(u).reshape(N, R, K)


def chol_from(diag_raw: np.ndarray, off: np.ndarray) -> np.ndarray:
    K = diag_raw.shape[0]
    L = np.diag(softplus_np(diag_raw))
    L[np.tril_indices(K, -1)] = off
    return L


def _person_logprobs(arrays: DataArrays, idx, alpha, betas) -> np.ndarray:
    """log prod_t P(y_nt | alpha, beta) for betas (n, R, K) -> (n, R)."""
    N, T, J, K, L = arrays.shape
    n = len(idx)
    v = betas @ arrays.xr[idx].transpose(0, 2, 1)  # (n, R, T*J)
    if L:
        v = v + (arrays.xf[idx].reshape(n, T * J, L) @ alpha)[:, None, :]
    v = v.reshape(n, -1, T, J)
    lse = logsumexp(np.where(arrays.lse_mask[idx][:, None], v, -np.inf), axis=-1)
    chosen = (v * arrays.onehot[idx][:, None]).sum(axis=-1)
    return ((chosen - lse) * arrays.menu_mask[idx][:, None]).sum(axis=-1)


def simulated_loglik(data: ChoiceDataset | DataArrays, alpha, zeta, omega_chol, draws: np.ndarray,
                     chunk: int = 256, per_person: bool = False):
    """sum_n log (1/R) sum_r prod_t P(y_nt | alpha, zeta + L eps_nr)."""
    arrays = data if isinstance(data, DataArrays) else DataArrays(data)
    if draws.ndim != 3 or draws.shape[1] < 1:
        raise ValueError("draws must be (N, R, K) with R >= 1")
    N = arrays.N
    R = draws.shape[1]
    out = np.empty(N)
    for s in range(0, N, chunk):
        idx = np.arange(s, min(N, s + chunk))
        betas = zeta + draws[idx] @ np.asarray(omega_chol).T
        out[idx] = logsumexp(_person_logprobs(arrays, idx, np.asarray(alpha, float), betas), axis=1) - np.log(R)
    return out if per_person else float(out.sum())


def simulated_loglik_tape(tape: Tape, P, arrays: DataArrays, draws: np.ndarray):
    """Same quantity on the tape, for alpha, zeta, chol.diag (raw), chol.off leaves."""
    N, T, J, K, L = arrays.shape
    R = draws.shape[1]
    chol = ad.fill_tril(ad.softplus(P["chol.diag"]), P["chol.off"])
    betas = P["zeta"] + tape.const(draws) @ chol.T  # (N, R, K)
    v = betas @ tape.const(arrays.xr.transpose(0, 2, 1))  # (N, R, T*J)
    if L:
        fixed = tape.const(arrays.xf.reshape(N, T * J, L)) @ P["alpha"]
        v = v + fixed.reshape(N, 1, T * J)
    v = v.reshape(N, R, T, J)
    lse = ad.logsumexp(v, axis=-1, mask=arrays.lse_mask[:, None])
    chosen = (v * tape.const(arrays.onehot[:, None])).sum(axis=-1)
    per_draw = ((chosen - lse) * tape.const(arrays.menu_mask[:, None])).sum(axis=-1)  # (N, R)
    return (ad.logsumexp(per_draw, axis=-1) - np.log(R)).sum()


def conditional_betas(data: ChoiceDataset | DataArrays, est: MsleEstimate, draws: np.ndarray,
                      chunk: int = 256) -> np.ndarray:
    """E[beta_n | y_n] by likelihood-weighted draws from N(zeta, Omega), weights in log space."""
    arrays = data if isinstance(data, DataArrays) else DataArrays(data)
    N = arrays.N
    out = np.empty((N, est.zeta.shape[0]))
    n_menus = arrays.menu_mask.sum(axis=1)
    for s in range(0, N, chunk):
        idx = np.arange(s, min(N, s + chunk))
        betas = est.zeta + draws[idx] @ est.omega_chol.T
        logw = _person_logprobs(arrays, idx, est.alpha, betas)
        w = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
        out[idx] = np.einsum("nr,nrk->nk", w, betas)
    out[n_menus == 0] = est.zeta  # no data: prior mean
    return out


def _eval(arrays, draws, params):
    tape = Tape()
    P = {k: tape.leaf(v) for k, v in params.items()}
    val = simulated_loglik_tape(tape, P, arrays, draws)
    grads = tape.backward(val)
    return float(val.value), {k: grads[t.id] for k, t in P.items()}


def fit_msle(dataset: ChoiceDataset, config: MsleConfig | None = None) -> tuple[MsleEstimate, FitReport]:
    """Adam ascent with step acceptance: a step that lowers the simulated loglik is undone
    and the learning rate halved, so accepted iterates are non-decreasing."""
    config = MsleConfig() if config is None else config
    config.validate()
    arrays = DataArrays(dataset)
    N, K, L = dataset.N, dataset.K, dataset.L
    draws = make_draws(N, config.n_draws, K, config.scheme, config.seed)
    params = {"alpha": np.zeros(L), "zeta": np.zeros(K), "chol.diag": np.full(K, inv_softplus(0.1)),
              "chol.off": np.zeros(n_offdiag(K))}
    t0 = time.perf_counter()
    val, grads = _eval(arrays, draws, params)
    if not np.isfinite(val):
        raise MsleError("simulated loglik is not finite at the starting point")
    opt = Adam(config.lr)
    trace = [(0, val, 0.0)]
    history = [val]
    converged = False
    for it in range(1, config.max_iter + 1):
        saved = (opt.t, {k: m.copy() for k, m in opt.m.items()}, {k: v.copy() for k, v in opt.v.items()})
        trial = dict(params)
        opt.step(trial, grads)
        try:
            new_val, new_grads = _eval(arrays, draws, trial)
        except ad.NonFiniteError:
            new_val = -np.inf
        if np.isfinite(new_val) and new_val >= val:
            params, val, grads = trial, new_val, new_grads
            opt.lr = min(config.lr, opt.lr * config.lr_growth)
            history.append(val)
            wall = (time.perf_counter() - t0) * 1000.0 if config.record_timing else 0.0
            trace.append((it, val, wall))
            if len(history) > config.window and \
                    history[-1] - history[-1 - config.window] <= config.rel_tol * abs(history[-1]):
                converged = True
                break
        else:
            opt.t, opt.m, opt.v = saved
            opt.lr *= 0.5
            if opt.lr < 1e-10:
                converged = True
                break
    chol = chol_from(params["chol.diag"], params["chol.off"])
    np.linalg.cholesky(chol @ chol.T)  # PD by construction
    est = MsleEstimate(params["alpha"].copy(), params["zeta"].copy(), chol)
    cdraws = make_draws(N, config.n_cond_draws, K, "pseudo", config.seed + 1)
    est.betas = conditional_betas(arrays, est, cdraws)
    wall_time = time.perf_counter() - t0 if config.record_timing else 0.0
    omega = est.omega
    tau = np.sqrt(np.diag(omega))
    means = {"alpha": est.alpha, "zeta": est.zeta, "tau": tau, "psi": omega / np.outer(tau, tau),
             "omega": omega, "beta": est.betas}
    report = FitReport("MSLE", trace, wall_time, len(trace) - 1, converged, L + K + K * (K + 1) // 2,
                       asdict(config), PosteriorSummary(means, {}), state=est)
    return est, report
