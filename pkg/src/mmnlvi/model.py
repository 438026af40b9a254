"""Mixed multinomial logit model: data containers, MNL kernel, priors, joint density."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import betaln, logsumexp

LOG_2PI = float(np.log(2 * np.pi))


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class MenuObservation:
    """One choice occasion. ``choice`` is a 0-based alternative index."""

    xf: np.ndarray  # (J, L)
    xr: np.ndarray  # (J, K)
    avail: np.ndarray  # (J,) bool
    choice: int

    def __post_init__(self):
        xf = np.atleast_2d(np.asarray(self.xf, dtype=float))
        xr = np.atleast_2d(np.asarray(self.xr, dtype=float))
        avail = np.asarray(self.avail, dtype=bool)
        if xf.shape[0] != xr.shape[0] or avail.shape != (xr.shape[0],):
            raise DataError(f"menu shapes disagree: xf {xf.shape}, xr {xr.shape}, avail {avail.shape}")
        if not avail.any():
            raise DataError("menu has no available alternative")
        if not 0 <= self.choice < avail.size or not avail[self.choice]:
            raise DataError(f"chosen alternative {self.choice} is not available")
        object.__setattr__(self, "xf", xf)
        object.__setattr__(self, "xr", xr)
        object.__setattr__(self, "avail", avail)


@dataclass
class ChoiceDataset:
    """Panel of choices stored as arrays padded to the longest person.

    ``menu_mask[n, t]`` is False for padding menus (t >= n_menus[n]).
    """

    xf: np.ndarray  # (N, T, J, L)
    xr: np.ndarray  # (N, T, J, K)
    avail: np.ndarray  # (N, T, J) bool
    choice: np.ndarray  # (N, T) int, 0-based
    n_menus: np.ndarray  # (N,) int
    person_ids: np.ndarray | None = None
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.xf = np.asarray(self.xf, dtype=float)
        self.xr = np.asarray(self.xr, dtype=float)
        self.avail = np.asarray(self.avail, dtype=bool)
        self.choice = np.asarray(self.choice, dtype=np.int64)
        self.n_menus = np.asarray(self.n_menus, dtype=np.int64)
        if self.person_ids is None:
            self.person_ids = np.arange(1, self.xr.shape[0] + 1)
        self.person_ids = np.asarray(self.person_ids, dtype=np.int64)
        if self.validate:
            self._check()

    def _check(self):
        n, t, j, k = self.xr.shape
        if self.xf.shape[:3] != (n, t, j) or self.xf.ndim != 4:
            raise DataError(f"xf shape {self.xf.shape} does not match xr {self.xr.shape}")
        if self.avail.shape != (n, t, j) or self.choice.shape != (n, t) or self.n_menus.shape != (n,):
            raise DataError("avail/choice/n_menus shapes disagree with covariates")
        if n < 1:
            raise DataError("dataset needs at least one person")
        if np.any(self.n_menus < 1) or np.any(self.n_menus > t):
            raise DataError("every person needs between 1 and T menus")
        mask = self.menu_mask
        if np.any(~self.avail.any(axis=2) & mask):
            raise DataError("a menu has no available alternative")
        if np.any((self.choice < 0) | (self.choice >= j)):
            raise DataError("choice index out of range")
        chosen_avail = np.take_along_axis(self.avail, self.choice[..., None], axis=2)[..., 0]
        if np.any(~chosen_avail & mask):
            bad = np.argwhere(~chosen_avail & mask)[0]
            raise DataError(f"person {bad[0]} menu {bad[1]}: chosen alternative unavailable")

    @property
    def N(self) -> int:
        return self.xr.shape[0]

    @property
    def T(self) -> int:
        return self.xr.shape[1]

    @property
    def J(self) -> int:
        return self.xr.shape[2]

    @property
    def K(self) -> int:
        return self.xr.shape[3]

    @property
    def L(self) -> int:
        return self.xf.shape[3]

    @property
    def menu_mask(self) -> np.ndarray:
        return np.arange(self.T)[None, :] < self.n_menus[:, None]

    @property
    def n_choices(self) -> int:
        return int(self.n_menus.sum())

    def subset(self, idx) -> "ChoiceDataset":
        idx = np.asarray(idx)
        return ChoiceDataset(self.xf[idx], self.xr[idx], self.avail[idx], self.choice[idx],
                             self.n_menus[idx], self.person_ids[idx], validate=False)

    def person_menus(self, n: int) -> list[MenuObservation]:
        return [MenuObservation(self.xf[n, t], self.xr[n, t], self.avail[n, t], int(self.choice[n, t]))
                for t in range(self.n_menus[n])]

    @classmethod
    def from_persons(cls, persons: list[list[MenuObservation]], person_ids=None) -> "ChoiceDataset":
        if not persons or any(len(p) == 0 for p in persons):
            raise DataError("need at least one person, each with at least one menu")
        first = persons[0][0]
        j, l_ = first.xf.shape
        k = first.xr.shape[1]
        t = max(len(p) for p in persons)
        n = len(persons)
        xf = np.zeros((n, t, j, l_))
        xr = np.zeros((n, t, j, k))
        avail = np.ones((n, t, j), dtype=bool)
        choice = np.zeros((n, t), dtype=np.int64)
        for i, menus in enumerate(persons):
            for s, m in enumerate(menus):
                if m.xf.shape != (j, l_) or m.xr.shape != (j, k):
                    raise DataError(f"person {i} menu {s}: dimensions differ from first menu")
                xf[i, s], xr[i, s], avail[i, s], choice[i, s] = m.xf, m.xr, m.avail, m.choice
        return cls(xf, xr, avail, choice, [len(p) for p in persons], person_ids)

    @staticmethod
    def concat(parts: list["ChoiceDataset"]) -> "ChoiceDataset":
        t = max(p.T for p in parts)

        def pad(a, fill):
            width = [(0, 0)] * a.ndim
            width[1] = (0, t - a.shape[1])
            return np.pad(a, width, constant_values=fill)

        return ChoiceDataset(
            np.concatenate([pad(p.xf, 0.0) for p in parts]),
            np.concatenate([pad(p.xr, 0.0) for p in parts]),
            np.concatenate([pad(p.avail, True) for p in parts]),
            np.concatenate([pad(p.choice, 0) for p in parts]),
            np.concatenate([p.n_menus for p in parts]),
            np.arange(1, sum(p.N for p in parts) + 1),
        )


@dataclass(frozen=True)
class GlobalParams:
    alpha: np.ndarray
    zeta: np.ndarray
    tau: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.tau) <= 0):
            raise ValueError("tau must be positive")
        check_correlation(self.psi)

    @property
    def omega(self) -> np.ndarray:
        return omega_from(self.tau, self.psi)


@dataclass(frozen=True)
class LocalParams:
    betas: np.ndarray  # (N, K)


@dataclass(frozen=True)
class PriorConfig:
    lambda0: np.ndarray
    xi0: np.ndarray
    mu0: np.ndarray
    sigma0_cov: np.ndarray
    sigma0: np.ndarray
    nu: float = 2.0

    @classmethod
    def default(cls, L: int, K: int) -> "PriorConfig":
        return cls(np.zeros(L), 100.0 * np.eye(L), np.zeros(K), 100.0 * np.eye(K),
                   np.full(K, 10.0), 2.0)

    def __post_init__(self):
        for name in ("xi0", "sigma0_cov"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.size and (not np.allclose(m, m.T) or np.linalg.eigvalsh(m).min() <= 0):
                raise ValueError(f"{name} must be symmetric positive definite")
        if np.any(np.asarray(self.sigma0) <= 0):
            raise ValueError("sigma0 must be positive")
        if self.nu < 1:
            raise ValueError("LKJ concentration must be >= 1")


# -- kernel ------------------------------------------------------------------


def systematic_utility(alpha: np.ndarray, beta: np.ndarray, menu: MenuObservation) -> np.ndarray:
    if menu.xf.shape[1] != np.size(alpha) or menu.xr.shape[1] != np.size(beta):
        raise ValueError(f"dimension mismatch: alpha {np.shape(alpha)} vs xf {menu.xf.shape}, "
                         f"beta {np.shape(beta)} vs xr {menu.xr.shape}")
    return menu.xf @ np.asarray(alpha, float) + menu.xr @ np.asarray(beta, float)


def mnl_logprob(v: np.ndarray, avail: np.ndarray, y: int) -> float:
    v = np.asarray(v, dtype=float)
    avail = np.asarray(avail, dtype=bool)
    if not avail[y]:
        raise ValueError(f"chosen alternative {y} is unavailable")
    return float(v[y] - logsumexp(v[avail]))


def utilities(ds: ChoiceDataset, alpha: np.ndarray, betas: np.ndarray) -> np.ndarray:
    """(N, T, J) utilities for person-specific betas (N, K)."""
    return ds.xf @ alpha + np.einsum("ntjk,nk->ntj", ds.xr, betas)


def menu_logprobs(ds: ChoiceDataset, v: np.ndarray) -> np.ndarray:
    """(N, T) log-probabilities of the observed choices; padding menus give 0."""
    vm = np.where(ds.avail, v, -np.inf)
    lse = logsumexp(vm, axis=-1)
    chosen = np.take_along_axis(v, ds.choice[..., None], axis=-1)[..., 0]
    return np.where(ds.menu_mask, chosen - lse, 0.0)


def loglik(ds: ChoiceDataset, alpha: np.ndarray, betas: np.ndarray) -> float:
    return float(menu_logprobs(ds, utilities(ds, alpha, betas)).sum())


# -- covariance pieces -------------------------------------------------------


def check_correlation(psi: np.ndarray, tol: float = 1e-10) -> None:
    psi = np.asarray(psi, dtype=float)
    if psi.ndim != 2 or psi.shape[0] != psi.shape[1]:
        raise ValueError(f"correlation matrix must be square, got {psi.shape}")
    if not np.allclose(psi, psi.T, atol=tol) or not np.allclose(np.diag(psi), 1.0, atol=tol):
        raise ValueError("correlation matrix must be symmetric with unit diagonal")
    try:
        np.linalg.cholesky(psi)
    except np.linalg.LinAlgError:
        raise ValueError("correlation matrix is not positive definite") from None


def omega_from(tau: np.ndarray, psi: np.ndarray) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise ValueError("tau must be positive")
    check_correlation(psi)
    return tau[:, None] * np.asarray(psi, float) * tau[None, :]


def split_omega(omega: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tau = np.sqrt(np.diag(omega))
    return tau, omega / np.outer(tau, tau)


# -- prior densities ---------------------------------------------------------


def lkj_log_normalizer(K: int, nu: float) -> float:
    """log of the LKJ normalising constant for the density over off-diagonal entries."""
    out = 0.0
    for k in range(1, K):
        a = nu + (K - k - 1) / 2.0
        out += (2 * nu - 2 + K - k) * (K - k) * np.log(2.0) + (K - k) * betaln(a, a)
    return float(out)


def lkj_logpdf(psi: np.ndarray, nu: float) -> float:
    check_correlation(psi)
    K = psi.shape[0]
    _, logdet = np.linalg.slogdet(psi)
    return float((nu - 1) * logdet - lkj_log_normalizer(K, nu))


def half_cauchy_logpdf(tau: np.ndarray, sigma0: np.ndarray) -> float:
    tau = np.asarray(tau, dtype=float)
    sigma0 = np.broadcast_to(np.asarray(sigma0, dtype=float), tau.shape)
    if np.any(tau < 0) or np.any(sigma0 <= 0):
        raise ValueError("half-Cauchy needs tau >= 0 and sigma0 > 0")
    return float(np.sum(np.log(2 / (np.pi * sigma0)) - np.log1p((tau / sigma0) ** 2)))


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray | None = None,
               chol: np.ndarray | None = None) -> np.ndarray | float:
    """Multivariate normal log-density of rows of ``x``; pass ``cov`` or its Cholesky ``chol``."""
    if chol is None:
        if cov is None:
            raise ValueError("need cov or chol")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance is not positive definite") from None
    x = np.asarray(x, dtype=float)
    diff = np.atleast_2d(x - mean)
    from scipy.linalg import solve_triangular

    u = solve_triangular(chol, diff.T, lower=True)
    k = chol.shape[0]
    out = -0.5 * k * LOG_2PI - np.log(np.diag(chol)).sum() - 0.5 * (u * u).sum(axis=0)
    return float(out[0]) if x.ndim == 1 else out


def log_prior_globals(g: GlobalParams, prior: PriorConfig) -> float:
    lp = 0.0
    if g.alpha.size:
        lp += mvn_logpdf(g.alpha, prior.lambda0, prior.xi0)
    lp += mvn_logpdf(g.zeta, prior.mu0, prior.sigma0_cov)
    lp += half_cauchy_logpdf(g.tau, prior.sigma0)
    lp += lkj_logpdf(g.psi, prior.nu)
    return float(lp)


def log_joint(ds: ChoiceDataset, g: GlobalParams, local: LocalParams, prior: PriorConfig) -> float:
    """Fully normalised log p(y, alpha, zeta, tau, Psi, beta_1:N)."""
    betas = np.asarray(local.betas, dtype=float)
    if betas.shape != (ds.N, ds.K) or np.size(g.alpha) != ds.L or np.size(g.zeta) != ds.K:
        raise ValueError(f"parameter shapes do not match dataset (N={ds.N}, L={ds.L}, K={ds.K})")
    lp = log_prior_globals(g, prior)
    lp += float(np.sum(mvn_logpdf(betas, g.zeta, g.omega)))
    lp += loglik(ds, np.asarray(g.alpha, float), betas)
    return lp


# -- CSV ---------------------------------------------------------------------


def dataset_columns(L: int, K: int) -> list[str]:
    return (["person_id", "menu_id", "alt_id", "avail", "chosen"]
            + [f"xf_{i}" for i in range(1, L + 1)] + [f"xr_{i}" for i in range(1, K + 1)])


def write_dataset_csv(ds: ChoiceDataset, path: str | Path) -> None:
    mask = ds.menu_mask
    n_idx, t_idx = np.nonzero(mask)
    J = ds.J
    pid = np.repeat(ds.person_ids[n_idx], J)
    mid = np.repeat(t_idx + 1, J)
    alt = np.tile(np.arange(1, J + 1), len(n_idx))
    av = ds.avail[n_idx, t_idx].reshape(-1).astype(int)
    chosen = (ds.choice[n_idx, t_idx][:, None] == np.arange(J)[None, :]).reshape(-1).astype(int)
    xf = ds.xf[n_idx, t_idx].reshape(-1, ds.L)
    xr = ds.xr[n_idx, t_idx].reshape(-1, ds.K)
    header = ",".join(dataset_columns(ds.L, ds.K))
    table = np.column_stack([pid, mid, alt, av, chosen, xf, xr])
    fmt = ["%d"] * 5 + ["%.17g"] * (ds.L + ds.K)
    np.savetxt(path, table, fmt=fmt, delimiter=",", header=header, comments="")


def read_dataset_csv(path: str | Path) -> ChoiceDataset:
    df = pd.read_csv(path, float_precision="round_trip")
    fixed = ["person_id", "menu_id", "alt_id", "avail", "chosen"]
    missing = [c for c in fixed if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    xf_cols = [c for c in df.columns if c.startswith("xf_")]
    xr_cols = [c for c in df.columns if c.startswith("xr_")]
    if [c for c in df.columns if c not in fixed + xf_cols + xr_cols]:
        raise DataError(f"{path}: unexpected columns")
    if not xr_cols:
        raise DataError(f"{path}: need at least one xr_ column")
    bad = df[fixed + xf_cols + xr_cols].isna().any(axis=1).to_numpy()
    if bad.any():
        raise DataError(f"{path}: row {int(np.argmax(bad)) + 2} has missing values")
    for c in ("avail", "chosen"):
        bad = ~df[c].isin([0, 1]).to_numpy()
        if bad.any():
            raise DataError(f"{path}: row {int(np.argmax(bad)) + 2}: {c} must be 0 or 1")
    J = int(df["alt_id"].max())
    bad = ((df["alt_id"] < 1) | (df["alt_id"] > J)).to_numpy()
    if bad.any():
        raise DataError(f"{path}: row {int(np.argmax(bad)) + 2}: alt_id out of range")
    df = df.reset_index().rename(columns={"index": "_row"})
    df = df.sort_values(["person_id", "menu_id", "alt_id"], kind="stable")
    keys = df[["person_id", "menu_id"]].to_numpy()
    if len(df) % J:
        raise DataError(f"{path}: row count is not a multiple of J={J}")
    groups = keys.reshape(-1, J, 2)
    alt = df["alt_id"].to_numpy().reshape(-1, J)
    rows = df["_row"].to_numpy().reshape(-1, J) + 2
    ok = (groups == groups[:, :1, :]).all(axis=(1, 2)) & (alt == np.arange(1, J + 1)).all(axis=1)
    if not ok.all():
        g = int(np.argmax(~ok))
        raise DataError(f"{path}: row {rows[g].min()}: each (person, menu) needs alternatives 1..{J}")
    avail = df["avail"].to_numpy().reshape(-1, J).astype(bool)
    chosen = df["chosen"].to_numpy().reshape(-1, J)
    valid = (chosen.sum(axis=1) == 1) & ((chosen * avail).sum(axis=1) == 1)
    if not valid.all():
        g = int(np.argmax(~valid))
        raise DataError(f"{path}: row {rows[g].min()}: need exactly one chosen available alternative")
    xf = df[xf_cols].to_numpy(float).reshape(-1, J, len(xf_cols))
    xr = df[xr_cols].to_numpy(float).reshape(-1, J, len(xr_cols))
    choice = chosen.argmax(axis=1)
    pids, starts, counts = np.unique(groups[:, 0, 0], return_index=True, return_counts=True)
    n, t = len(pids), int(counts.max())
    XF = np.zeros((n, t, J, len(xf_cols)))
    XR = np.zeros((n, t, J, len(xr_cols)))
    AV = np.ones((n, t, J), dtype=bool)
    CH = np.zeros((n, t), dtype=np.int64)
    person = np.repeat(np.arange(n), counts)
    slot = np.arange(len(groups)) - np.repeat(starts, counts)
    XF[person, slot], XR[person, slot], AV[person, slot], CH[person, slot] = xf, xr, avail, choice
    return ChoiceDataset(XF, XR, AV, CH, counts, pids)
