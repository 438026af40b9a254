"""Synthetic MMNL panels with recorded ground truth."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import ChoiceDataset, GlobalParams, check_correlation, write_dataset_csv

ZETA_POINT = "point"
ZETA_LOGNORMAL = "lognormal"


def default_alpha(L: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, L) if L > 1 else np.zeros(L)


def default_zeta(K: int) -> np.ndarray:
    return np.linspace(-1.5, 1.5, K) if K > 1 else np.zeros(K)


def equicorrelation(K: int, rho: float = 0.8) -> np.ndarray:
    psi = np.full((K, K), rho)
    np.fill_diagonal(psi, 1.0)
    return psi


@dataclass
class ScenarioSpec:
    N: int
    T: int
    J: int = 5
    L: int = 3
    K: int = 5
    alpha: np.ndarray | None = None
    zeta: np.ndarray | None = None
    tau: np.ndarray | None = None
    psi: np.ndarray | None = None
    zeta_dist: str = ZETA_POINT
    seed: int = 0
    name: str = field(default="")

    def __post_init__(self):
        for dim in ("N", "T", "J", "K"):
            if getattr(self, dim) < 1:
                raise ValueError(f"{dim} must be positive")
        if self.L < 0:
            raise ValueError("L must be non-negative")
        self.alpha = default_alpha(self.L) if self.alpha is None else np.asarray(self.alpha, float)
        self.zeta = default_zeta(self.K) if self.zeta is None else np.asarray(self.zeta, float)
        self.tau = np.ones(self.K) if self.tau is None else np.asarray(self.tau, float)
        self.psi = equicorrelation(self.K) if self.psi is None else np.asarray(self.psi, float)
        if self.alpha.shape != (self.L,) or self.zeta.shape != (self.K,) or self.tau.shape != (self.K,):
            raise ValueError("true parameter shapes disagree with (L, K)")
        if np.any(self.tau <= 0):
            raise ValueError("tau must be positive")
        check_correlation(self.psi)
        if self.zeta_dist not in (ZETA_POINT, ZETA_LOGNORMAL):
            raise ValueError(f"unknown zeta distribution {self.zeta_dist!r}")
        if not self.name:
            suffix = "-lognormal" if self.zeta_dist == ZETA_LOGNORMAL else ""
            self.name = f"N{self.N}-T{self.T}{suffix}"

    def with_seed(self, seed: int) -> "ScenarioSpec":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class GroundTruth:
    globals: GlobalParams
    betas: np.ndarray

    @property
    def omega(self) -> np.ndarray:
        return self.globals.omega


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def simulate(spec: ScenarioSpec) -> tuple[ChoiceDataset, GroundTruth]:
    """Draw a panel: betas ~ N(zeta, Omega), covariates ~ U(0, 1), choices ~ MNL.

    Each person has its own Philox stream keyed by (seed, person), so the
    result does not depend on generation order.
    """
    zeta = spec.zeta
    if spec.zeta_dist == ZETA_LOGNORMAL:
        zeta = np.exp(_stream(spec.seed, 0).standard_normal(spec.K))
    g = GlobalParams(spec.alpha.copy(), zeta, spec.tau.copy(), spec.psi.copy())
    chol = np.linalg.cholesky(g.omega)
    N, T, J, L, K = spec.N, spec.T, spec.J, spec.L, spec.K
    betas = np.empty((N, K))
    xf = np.empty((N, T, J, L))
    xr = np.empty((N, T, J, K))
    u = np.empty((N, T))
    for n in range(N):
        rng = _stream(spec.seed, 1, n)
        betas[n] = zeta + chol @ rng.standard_normal(K)
        x = rng.random((T, J, L + K))
        xf[n] = x[..., :L]
        xr[n] = x[..., L:]
        u[n] = rng.random(T)
    v = xf @ g.alpha + np.einsum("ntjk,nk->ntj", xr, betas)
    p = np.exp(v - v.max(axis=-1, keepdims=True))
    cdf = np.cumsum(p, axis=-1)
    cdf /= cdf[..., -1:]
    choice = np.minimum((u[..., None] > cdf).sum(axis=-1), J - 1)
    ds = ChoiceDataset(xf, xr, np.ones((N, T, J), bool), choice, np.full(N, T))
    return ds, GroundTruth(g, betas)


TABLE1_SHAPES = [(500, 5), (2000, 10), (5000, 10), (10000, 10), (50000, 10)]
TABLE3_SHAPES = [(500, 5), (500, 10), (2000, 5), (2000, 10)]


def canonical_scenarios(seed: int = 0) -> list[ScenarioSpec]:
    """Five Table-1 style shapes followed by four log-normal-zeta shapes."""
    out = [ScenarioSpec(N, T, seed=seed) for N, T in TABLE1_SHAPES]
    out += [ScenarioSpec(N, T, zeta_dist=ZETA_LOGNORMAL, seed=seed) for N, T in TABLE3_SHAPES]
    return out


# -- ground-truth sidecar -----------------------------------------------------


def truth_path(dataset_path: str | Path) -> Path:
    p = Path(dataset_path)
    return p.with_name(p.stem + ".truth.csv")


def write_truth_csv(truth: GroundTruth, path: str | Path, person_ids=None) -> None:
    g = truth.globals
    ids = np.arange(1, truth.betas.shape[0] + 1) if person_ids is None else person_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", "person_id", "index", "value"])
        for name, vec in (("alpha", g.alpha), ("zeta", g.zeta), ("tau", g.tau), ("psi", g.psi.reshape(-1))):
            for i, v in enumerate(vec, start=1):
                w.writerow([name, "", i, repr(float(v))])
        for pid, row in zip(ids, truth.betas):
            for i, v in enumerate(row, start=1):
                w.writerow(["beta", int(pid), i, repr(float(v))])


def read_truth_csv(path: str | Path) -> tuple[GroundTruth, np.ndarray]:
    """Return the ground truth and the person ids its betas belong to."""
    vals: dict[str, list[float]] = {"alpha": [], "zeta": [], "tau": [], "psi": []}
    betas: dict[int, list[float]] = {}
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        if r.fieldnames != ["param", "person_id", "index", "value"]:
            raise ValueError(f"{path}: unexpected header {r.fieldnames}")
        for row in r:
            if row["param"] == "beta":
                betas.setdefault(int(row["person_id"]), []).append(float(row["value"]))
            elif row["param"] in vals:
                vals[row["param"]].append(float(row["value"]))
            else:
                raise ValueError(f"{path}: unknown param {row['param']!r}")
    K = len(vals["zeta"])
    g = GlobalParams(np.array(vals["alpha"]), np.array(vals["zeta"]), np.array(vals["tau"]),
                     np.array(vals["psi"]).reshape(K, K))
    ids = np.array(sorted(betas), dtype=np.int64)
    return GroundTruth(g, np.array([betas[i] for i in ids]).reshape(len(ids), K)), ids


def write_scenario(spec: ScenarioSpec, path: str | Path) -> tuple[ChoiceDataset, GroundTruth]:
    ds, truth = simulate(spec)
    write_dataset_csv(ds, path)
    write_truth_csv(truth, truth_path(path), ds.person_ids)
    return ds, truth
