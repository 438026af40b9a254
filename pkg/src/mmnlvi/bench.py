"""Metrics, repeated-run benchmarks, result tables and plots."""
from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .datagen import GroundTruth, ScenarioSpec, simulate
from .model import ChoiceDataset, PriorConfig, loglik, utilities
from .msle import MsleConfig, fit_msle, make_draws, simulated_loglik
from .vi import DataArrays, FitConfig, fit

METHODS = ("MSLE", "SVI", "AVI", "AVI2", "SVI-LN", "SVI-NF")
CSV_FIELDS = ["scenario", "method", "rep", "runtime_s", "loglik", "simloglik", "rmse_alpha", "rmse_zeta",
              "rmse_beta", "rmse_omega", "accuracy"]
SIM_DRAWS = 1000


@dataclass
class MetricSet:
    runtime_s: float
    loglik: float
    simloglik: float
    rmse_alpha: float
    rmse_zeta: float
    rmse_beta: float
    rmse_omega: float
    accuracy: float

    def __post_init__(self):
        for name in ("rmse_alpha", "rmse_zeta", "rmse_beta", "rmse_omega"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


METRICS = [f.name for f in fields(MetricSet)]


def rmse(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.sqrt(np.mean((a - b) ** 2))) if a.size else 0.0


def rmse_unique(a: np.ndarray, b: np.ndarray) -> float:
    """RMSE over the lower triangle including the diagonal."""
    idx = np.tril_indices(np.asarray(a).shape[0])
    return rmse(np.asarray(a)[idx], np.asarray(b)[idx])


def accuracy(ds: ChoiceDataset, alpha: np.ndarray, betas: np.ndarray) -> float:
    v = np.where(ds.avail, utilities(ds, alpha, betas), -np.inf)
    hit = (np.argmax(v, axis=-1) == ds.choice) & ds.menu_mask
    return float(hit.sum() / ds.n_choices)


def safe_cholesky(omega: np.ndarray) -> np.ndarray:
    omega = 0.5 * (omega + omega.T)
    jitter = 0.0
    for _ in range(10):
        try:
            return np.linalg.cholesky(omega + jitter * np.eye(omega.shape[0]))
        except np.linalg.LinAlgError:
            jitter = max(1e-12, 10 * jitter)
    raise np.linalg.LinAlgError("estimated Omega is not positive definite")


def compute_metrics(estimates: dict, truth: GroundTruth | None, dataset: ChoiceDataset,
                    draws: np.ndarray | None = None, runtime_s: float = 0.0, seed: int = 0) -> MetricSet:
    """Point-estimate metrics; ``estimates`` needs alpha, zeta, omega and beta (N, K)."""
    if truth is None:
        raise ValueError("metrics need the ground truth")
    g = truth.globals
    alpha, zeta = np.asarray(estimates["alpha"], float), np.asarray(estimates["zeta"], float)
    omega, beta = np.asarray(estimates["omega"], float), np.asarray(estimates["beta"], float)
    if draws is None:
        draws = make_draws(dataset.N, SIM_DRAWS, dataset.K, "halton", seed)
    sim = simulated_loglik(dataset, alpha, zeta, safe_cholesky(omega), draws, chunk=64)
    return MetricSet(
        runtime_s=float(runtime_s),
        loglik=loglik(dataset, alpha, beta),
        simloglik=sim,
        rmse_alpha=rmse(alpha, g.alpha),
        rmse_zeta=rmse(zeta, g.zeta),
        rmse_beta=rmse(beta, truth.betas),
        rmse_omega=rmse_unique(omega, g.omega),
        accuracy=accuracy(dataset, alpha, beta),
    )


# -- method presets ----------------------------------------------------------


def desk_fit_config(N: int, **overrides) -> FitConfig:
    """Benchmark defaults: a hold-then-decay learning-rate schedule with ~3000 optimizer steps.

    Single-sample ELBO noise makes the patience rule stop far too early on these
    problems, so patience is effectively disabled and the step budget decides.
    """
    batch = min(N, 2000)
    steps_per_epoch = math.ceil(N / batch)
    base = dict(lr=0.03, lr_final=0.001, decay_start=0.33, max_epochs=max(1, 3000 // steps_per_epoch),
                patience=10**9)
    base.update(overrides)
    return FitConfig(**base)


def method_config(method: str, base: FitConfig) -> FitConfig:
    if method in ("SVI", "AVI", "AVI2"):
        return replace(base, method=method)
    if method == "SVI-LN":
        return replace(base, method="SVI", zeta_family="lognormal")
    if method == "SVI-NF":
        return replace(base, method="SVI", flows={**base.flows, "zeta": (4, None)})
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def fit_method(method: str, dataset: ChoiceDataset, fit_config: FitConfig | None = None,
               msle_config: MsleConfig | None = None, prior: PriorConfig | None = None, monitor=None):
    """Fit one method; returns (estimates, FitReport)."""
    if method == "MSLE":
        _, report = fit_msle(dataset, msle_config)
        return report.estimates(), report
    prior = PriorConfig.default(dataset.L, dataset.K) if prior is None else prior
    cfg = method_config(method, fit_config if fit_config is not None else desk_fit_config(dataset.N))
    report = fit(dataset, prior, cfg, monitor=monitor)
    report.method = method
    return report.estimates(), report


def rmse_beta_monitor(dataset: ChoiceDataset, truth: GroundTruth, every: int = 1):
    """Monitor callback recording (epoch, RMSE beta_n) from the current q means."""
    arrays = DataArrays(dataset, with_encoding=True)
    out: list[tuple[int, float]] = []

    def monitor(epoch, state):
        if epoch % every == 0:
            mean, _ = state.local.posterior_np(state.params, arrays)
            out.append((epoch, rmse(mean, truth.betas)))
    return monitor, out


def epochs_to_within(trace: list[tuple[int, float]], frac: float = 0.05) -> int:
    """First epoch from which the metric stays within ``frac`` of its final value."""
    if not trace:
        raise ValueError("empty trace")
    final = trace[-1][1]
    hit = trace[-1][0]
    for epoch, val in reversed(trace):
        if abs(val - final) > frac * abs(final):
            break
        hit = epoch
    return hit


# -- benchmark orchestration -------------------------------------------------


@dataclass
class BenchRun:
    scenario: ScenarioSpec
    methods: list[str]
    repetitions: int
    rows: list[dict] = field(default_factory=list)  # scenario, method, rep + MetricSet fields
    failures: list[dict] = field(default_factory=list)
    traces: dict = field(default_factory=dict)  # (method, rep) -> [(epoch, rmse_beta)]
    reports: dict = field(default_factory=dict)  # (method, rep) -> FitReport

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    def metric_sets(self, method: str) -> list[MetricSet]:
        return [MetricSet(**{k: r[k] for k in METRICS}) for r in self.rows if r["method"] == method]

    def aggregate(self) -> dict[str, dict]:
        return {m: aggregate(self.metric_sets(m)) for m in self.methods}


def aggregate(sets: list[MetricSet]) -> dict:
    """Mean and sd (ddof 1; 0 for a single rep) per metric, with the count.

    Sums use math.fsum, so the result does not depend on repetition order.
    """
    n = len(sets)
    out: dict = {"n": n}
    for name in METRICS:
        vals = [getattr(s, name) for s in sets]
        if n == 0:
            out[name] = (math.nan, math.nan)
            continue
        mean = math.fsum(vals) / n
        sd = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (n - 1)) if n > 1 else 0.0
        out[name] = (mean, sd)
    return out


def run_benchmark(scenarios: list[ScenarioSpec], methods: list[str], repetitions: int = 10, seed: int = 0,
                  fit_config: FitConfig | None = None, msle_config: MsleConfig | None = None,
                  record_timing: bool = True, trace_every: int = 0, keep_reports: bool = False,
                  csv_path=None, log=None) -> list[BenchRun]:
    """Each repetition draws an independent dataset with seed + rep; per-rep failures are recorded."""
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
    runs = []
    for spec in scenarios:
        run = BenchRun(spec, list(methods), repetitions)
        for rep in range(repetitions):
            ds, truth = simulate(spec.with_seed(seed + rep))
            draws = make_draws(ds.N, SIM_DRAWS, ds.K, "halton", seed + rep + 1)
            for method in methods:
                monitor, trace = (rmse_beta_monitor(ds, truth, trace_every) if trace_every and method != "MSLE"
                                  else (None, None))
                fc = replace(fit_config if fit_config is not None else desk_fit_config(ds.N),
                             seed=seed + rep, record_timing=record_timing)
                mc = replace(msle_config if msle_config is not None else MsleConfig(),
                             seed=seed + rep, record_timing=record_timing)
                try:
                    t0 = time.perf_counter()
                    est, report = fit_method(method, ds, fc, mc, monitor=monitor)
                    runtime = time.perf_counter() - t0 if record_timing else 0.0
                    ms = compute_metrics(est, truth, ds, draws, runtime)
                except Exception as exc:  # recorded, the benchmark goes on
                    run.failures.append({"scenario": spec.name, "method": method, "rep": rep,
                                         "error": f"{type(exc).__name__}: {exc}"})
                    if log:
                        log(f"{spec.name} {method} rep {rep}: FAILED {exc}")
                    continue
                run.rows.append({"scenario": spec.name, "method": method, "rep": rep, **ms.as_dict()})
                if trace is not None:
                    run.traces[(method, rep)] = trace
                if keep_reports:
                    run.reports[(method, rep)] = report
                if log:
                    log(f"{spec.name} {method} rep {rep}: " +
                        " ".join(f"{k}={v:.4g}" for k, v in ms.as_dict().items()))
        runs.append(run)
        if csv_path is not None:
            write_bench_csv(runs, csv_path)
    return runs


# -- emission ----------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_bench_csv(runs: list[BenchRun], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for run in runs:
            for r in run.rows:
                w.writerow([r["scenario"], r["method"], r["rep"]] + [_fmt(r[k]) for k in METRICS])


def read_bench_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != CSV_FIELDS:
            raise ValueError(f"{path}: unexpected header {rd.fieldnames}")
        return [{"scenario": r["scenario"], "method": r["method"], "rep": int(r["rep"]),
                 **{k: float(r[k]) for k in METRICS}} for r in rd]


def write_failures_csv(runs: list[BenchRun], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "method", "rep", "error"])
        for run in runs:
            for f in run.failures:
                w.writerow([f["scenario"], f["method"], f["rep"], f["error"]])


TABLE_COLUMNS = [("runtime_s", "Runtime (s)*"), ("loglik", "Loglik."), ("simloglik", "Sim. Loglik."),
                 ("rmse_alpha", "RMSE alpha"), ("rmse_zeta", "RMSE zeta"), ("rmse_beta", "RMSE beta_n"),
                 ("rmse_omega", "RMSE Omega"), ("accuracy", "Accuracy")]


def write_summary(runs: list[BenchRun], csv_path, text_path=None) -> None:
    """Aggregate table (mean and sd per metric) as CSV, plus an optional text table."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "method", "n_ok", "n_failed"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "sd")])
        for run in runs:
            agg = run.aggregate()
            for m in run.methods:
                nf = sum(1 for f in run.failures if f["method"] == m)
                w.writerow([run.scenario.name, m, agg[m]["n"], nf] +
                           [_fmt(v) for k in METRICS for v in agg[m][k]])
    if text_path is None:
        return
    lines = []
    for run in runs:
        s = run.scenario
        lines.append(f"N = {s.N}; T = {s.T}; J = {s.J}; L = {s.L}; K = {s.K}; reps = {run.repetitions}")
        lines.append(" | ".join(["Method"] + [c for _, c in TABLE_COLUMNS]))
        agg = run.aggregate()
        for m in run.methods:
            cells = [f"{m} (n={agg[m]['n']})"]
            for k, _ in TABLE_COLUMNS:
                mean, sd = agg[m][k]
                digits = 0 if k in ("loglik", "simloglik", "runtime_s") else 3
                cells.append(f"{mean:.{digits}f} (+-{sd:.{digits}f})")
            lines.append(" | ".join(cells))
        lines.append("")
    lines.append("* runtimes are hardware-dependent and only comparable within one machine")
    Path(text_path).write_text("\n".join(lines) + "\n")


def _svg_setup():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "mmnlvi"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def emit_plots(runs: list[BenchRun], out_dir, traces: dict | None = None) -> list[Path]:
    """Scalability (runtime vs N) and RMSE-beta-vs-epoch plots as SVG, each with a CSV sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    plt = _svg_setup()
    if len(runs) >= 2:
        methods = sorted({m for r in runs for m in r.methods}, key=METHODS.index)
        points = []
        for run in runs:
            agg = run.aggregate()
            for m in run.methods:
                if agg[m]["n"]:
                    points.append((m, run.scenario.N, agg[m]["runtime_s"][0]))
        side = out_dir / "scalability.csv"
        with open(side, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "N", "runtime_s"])
            for m, n, t in points:
                w.writerow([m, n, _fmt(t)])
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for m in methods:
            xs = [n for mm, n, _ in points if mm == m]
            ys = [t for mm, _, t in points if mm == m]
            ax.plot(xs, ys, marker="o", label=m)
        ax.set_xlabel("N")
        ax.set_ylabel("runtime (s)")
        ax.legend()
        fig.tight_layout()
        path = out_dir / "scalability.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written += [path, side]
    else:
        warnings.warn("scalability plot needs at least two scenarios; skipped")
    traces = traces if traces is not None else {(run.scenario.name,) + k: v for run in runs for k, v in run.traces.items()}
    traces = {k: v for k, v in traces.items() if v}
    if not traces:
        warnings.warn("no convergence traces; trace plot omitted")
        return written
    side = out_dir / "convergence.csv"
    with open(side, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "method", "rep", "epoch", "rmse_beta"])
        for key in sorted(traces):
            scen, method, rep = key
            for e, v in traces[key]:
                w.writerow([scen, method, rep, e, _fmt(v)])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in sorted(traces):
        scen, method, rep = key
        e, v = zip(*traces[key])
        ax.plot(e, v, label=f"{method} {scen} rep {rep}", lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("RMSE beta_n")
    ax.legend(fontsize=6)
    fig.tight_layout()
    path = out_dir / "convergence.svg"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return written + [path, side]
