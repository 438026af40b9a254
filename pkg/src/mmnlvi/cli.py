"""Command-line entry point: generate, fit, predict, bench, plot.

Config files are JSON or YAML with these top-level sections (all optional):

    seed:     integer applied to every section that does not set its own seed
    scenario: ScenarioSpec fields (N, T, J, L, K, alpha, zeta, tau, psi, zeta_dist, name, seed)
    prior:    PriorConfig fields (lambda0, xi0, mu0, sigma0_cov, sigma0, nu)
    fit:      FitConfig fields except method and flows
    msle:     MsleConfig fields
    flow:     "block:sylvester:depth", e.g. "zeta:sylvester:4"
    bench:    scenarios (list of scenario mappings), methods, repetitions, trace_every
    output:   dir (relative paths resolve against the config file's directory)

Unknown keys anywhere are rejected. Errors end the process with a nonzero exit
code and a single ``error: {json}`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

SECTIONS = ("seed", "scenario", "prior", "fit", "msle", "flow", "bench", "output")
BENCH_KEYS = ("scenarios", "methods", "repetitions", "trace_every")
FIT_METHODS = ("msle", "svi", "avi", "avi2")


class ConfigError(ValueError):
    pass


def _check_keys(section: str, got: dict, allowed) -> None:
    if not isinstance(got, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = sorted(set(got) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")


def _field_names(cls, drop=()) -> list[str]:
    return [f.name for f in fields(cls) if f.name not in drop]


@dataclass
class RunConfig:
    seed: int = 0
    scenario: dict = field(default_factory=dict)
    prior: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    msle: dict = field(default_factory=dict)
    flow: str | None = None
    bench: dict = field(default_factory=dict)
    output_dir: Path | None = None

    @classmethod
    def from_dict(cls, raw: dict | None, base_dir: Path | None = None) -> "RunConfig":
        from .datagen import ScenarioSpec
        from .model import PriorConfig
        from .msle import MsleConfig
        from .vi import FitConfig

        raw = dict(raw or {})
        _check_keys("<root>", raw, SECTIONS)
        seed = raw.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("seed must be an integer")
        cfg = cls(seed=seed)
        cfg.scenario = dict(raw.get("scenario") or {})
        _check_keys("scenario", cfg.scenario, _field_names(ScenarioSpec))
        cfg.prior = dict(raw.get("prior") or {})
        _check_keys("prior", cfg.prior, _field_names(PriorConfig))
        cfg.fit = dict(raw.get("fit") or {})
        _check_keys("fit", cfg.fit, _field_names(FitConfig, ("method", "flows")))
        cfg.msle = dict(raw.get("msle") or {})
        _check_keys("msle", cfg.msle, _field_names(MsleConfig))
        cfg.flow = raw.get("flow")
        if cfg.flow is not None:
            from .flows import parse_flow_spec

            parse_flow_spec(cfg.flow)
        cfg.bench = dict(raw.get("bench") or {})
        _check_keys("bench", cfg.bench, BENCH_KEYS)
        for i, s in enumerate(cfg.bench.get("scenarios", [])):
            _check_keys(f"bench.scenarios[{i}]", s, _field_names(ScenarioSpec))
        out = dict(raw.get("output") or {})
        _check_keys("output", out, ("dir",))
        if "dir" in out:
            p = Path(out["dir"])
            cfg.output_dir = (p if p.is_absolute() or base_dir is None else base_dir / p).resolve()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        text = path.read_text()
        if path.suffix in (".yaml", ".yml"):
            import yaml

            raw = yaml.safe_load(text)
        else:
            raw = json.loads(text)
        return cls.from_dict(raw, path.parent.resolve())

    # -- builders --------------------------------------------------------------

    def scenario_spec(self, extra: dict | None = None):
        from .datagen import ScenarioSpec

        d = {"N": 100, "T": 5, "seed": self.seed, **self.scenario, **(extra or {})}
        return ScenarioSpec(**d)

    def prior_config(self, L: int, K: int):
        import numpy as np

        from .model import PriorConfig

        if not self.prior:
            return PriorConfig.default(L, K)
        base = PriorConfig.default(L, K)
        d = {f.name: getattr(base, f.name) for f in fields(PriorConfig)}
        d.update({k: (np.asarray(v, float) if k != "nu" else float(v)) for k, v in self.prior.items()})
        return PriorConfig(**d)

    def fit_config(self, method: str, N: int, desk: bool = False):
        from dataclasses import replace

        from .bench import desk_fit_config
        from .flows import parse_flow_spec
        from .vi import FitConfig

        d = {"seed": self.seed, **self.fit}
        cfg = desk_fit_config(N, **d) if desk else FitConfig(**d)
        cfg = replace(cfg, method=method)
        if self.flow:
            block, depth = parse_flow_spec(self.flow)
            cfg = replace(cfg, flows={**cfg.flows, block: (depth, None)})
        return cfg

    def msle_config(self):
        from .msle import MsleConfig

        return MsleConfig(**{"seed": self.seed, **self.msle})


# -- presets -------------------------------------------------------------------


def table1_desk() -> dict:
    return {"scenarios": [{"N": 500, "T": 5}, {"N": 2000, "T": 10}],
            "methods": ["MSLE", "SVI", "AVI", "AVI2"], "repetitions": 10}


def table3_desk() -> dict:
    return {"scenarios": [{"N": n, "T": t, "zeta_dist": "lognormal"} for n in (500, 2000) for t in (5, 10)],
            "methods": ["SVI-LN", "SVI", "SVI-NF"], "repetitions": 10}


# -- commands ------------------------------------------------------------------


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_generate(args) -> dict:
    from .datagen import truth_path, write_scenario

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    extra = {k: v for k, v in (("N", args.N), ("T", args.T), ("seed", args.seed)) if v is not None}
    spec = cfg.scenario_spec(extra)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds, _ = write_scenario(spec, out)
    return {"dataset": str(out), "truth": str(truth_path(out)), "N": ds.N, "T": ds.T}


def _check_config_dims(cfg: RunConfig, ds) -> None:
    want = {k: cfg.scenario[k] for k in ("J", "L", "K") if k in cfg.scenario}
    have = {"J": ds.J, "L": ds.L, "K": ds.K}
    bad = {k: (v, have[k]) for k, v in want.items() if v != have[k]}
    if bad:
        raise ValueError("dimension mismatch between config and dataset: " +
                         ", ".join(f"{k} config={a} dataset={b}" for k, (a, b) in bad.items()))


def cmd_fit(args) -> dict:
    from .amortization import VARIANTS
    from .model import read_dataset_csv
    from .msle import fit_msle
    from .vi import fit

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.flow:
        from .flows import parse_flow_spec

        parse_flow_spec(args.flow)
        cfg.flow = args.flow
    if args.seed is not None:
        cfg.seed = args.seed
    ds = read_dataset_csv(args.dataset)
    _check_config_dims(cfg, ds)
    out = Path(args.out)
    method = args.method.upper()
    if method == "MSLE":
        if cfg.flow:
            raise ValueError("flows apply to variational methods only")
        mc = cfg.msle_config()
        if args.no_timing:
            mc.record_timing = False
        mc.validate()
        out.mkdir(parents=True, exist_ok=True)
        _, report = fit_msle(ds, mc)
    else:
        fc = cfg.fit_config(method, ds.N, desk=args.desk)
        if args.no_timing:
            fc.record_timing = False
        fc.validate(ds.N)  # e.g. batch size > N fails here, before any work
        out.mkdir(parents=True, exist_ok=True)
        report = fit(ds, cfg.prior_config(ds.L, ds.K), fc)
    written = {"report": str(out / "report.json")}
    report.save(out / "report.json")
    if method in VARIANTS:
        report.state.local.save(out / "weights.bin", report.state.params, report.summary.means["alpha"])
        written["weights"] = str(out / "weights.bin")
    return written


def write_posterior_csv(pred, path, person_ids) -> None:
    import csv

    K = pred.means.shape[1]
    rows, cols = [], []
    for i in range(K):
        for j in range(i + 1):
            rows.append(i)
            cols.append(j)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["person_id"] + [f"mu_{k + 1}" for k in range(K)] +
                   [f"chol_{i + 1}_{j + 1}" for i, j in zip(rows, cols)])
        for pid, m, c in zip(person_ids, pred.means, pred.chols):
            w.writerow([int(pid)] + [repr(float(v)) for v in m] + [repr(float(c[i, j])) for i, j in zip(rows, cols)])


def cmd_predict(args) -> dict:
    import numpy as np

    from .amortization import InferenceNetwork, predict_out_of_sample
    from .datagen import read_truth_csv, truth_path
    from .model import read_dataset_csv

    net, alpha = InferenceNetwork.load(args.weights)
    ds = read_dataset_csv(args.dataset)
    tpath = truth_path(args.dataset)
    true_betas = None
    if tpath.exists():
        truth, ids = read_truth_csv(tpath)
        if not np.array_equal(ids, ds.person_ids):
            raise ValueError(f"{tpath}: person ids do not match the dataset")
        true_betas = truth.betas
    pred = predict_out_of_sample(net, ds, alpha, true_betas)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_posterior_csv(pred, out, ds.person_ids)
    written = {"posterior": str(out)}
    if true_betas is not None:
        mpath = out.with_name(out.stem + ".metrics.json")
        mpath.write_text(json.dumps(pred.metrics, indent=1, sort_keys=True) + "\n")
        written["metrics"] = str(mpath)
    return written


def _bench_runs_from_dir(d: Path):
    """Rebuild BenchRun objects from a bench output directory."""
    from .bench import BenchRun, read_bench_csv
    from .datagen import ScenarioSpec

    meta = json.loads((d / "scenarios.json").read_text())
    rows = read_bench_csv(d / "bench.csv")
    runs = []
    for s in meta["scenarios"]:
        spec = ScenarioSpec(**s)
        run = BenchRun(spec, meta["methods"], meta["repetitions"])
        run.rows = [r for r in rows if r["scenario"] == spec.name]
        runs.append(run)
    traces = None
    conv = d / "convergence.csv"
    if conv.exists():
        import csv

        traces = {}
        with open(conv, newline="") as fh:
            for r in csv.DictReader(fh):
                traces.setdefault((r["scenario"], r["method"], int(r["rep"])), []).append(
                    (int(r["epoch"]), float(r["rmse_beta"])))
    return runs, traces


def cmd_bench(args) -> dict:
    from .bench import emit_plots, run_benchmark, write_failures_csv, write_summary

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    b = dict(cfg.bench)
    if args.paper_table1_desk:
        b = {**table1_desk(), **{k: v for k, v in b.items() if k != "scenarios"}}
    if args.paper_table3_desk:
        b = {**table3_desk(), **{k: v for k, v in b.items() if k != "scenarios"}}
    if args.reps is not None:
        b["repetitions"] = args.reps
    scen = b.get("scenarios") or [cfg.scenario]
    specs = [cfg.scenario_spec({**s, "seed": cfg.seed}) for s in scen]
    methods = b.get("methods", ["MSLE", "SVI", "AVI", "AVI2"])
    reps = int(b.get("repetitions", 10))
    out = Path(args.out) if args.out else cfg.output_dir
    if out is None:
        raise ConfigError("bench needs --out or output.dir in the config")
    out.mkdir(parents=True, exist_ok=True)
    fc = cfg.fit_config("SVI", max(s.N for s in specs), desk=True) if (cfg.fit or cfg.flow) else None
    runs = run_benchmark(specs, methods, reps, seed=cfg.seed, fit_config=fc,
                         msle_config=cfg.msle_config(), record_timing=not args.no_timing,
                         trace_every=int(b.get("trace_every", 0)), csv_path=out / "bench.csv",
                         log=None if args.quiet else _log)
    meta = {"scenarios": [_spec_dict(s) for s in specs], "methods": methods, "repetitions": reps}
    (out / "scenarios.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    write_failures_csv(runs, out / "failures.csv")
    write_summary(runs, out / "summary.csv", out / "summary.txt")
    import warnings

    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        plots = emit_plots(runs, out)
    for w in rec:
        _log(f"warning: {w.message}")
    return {"bench": str(out / "bench.csv"), "summary": str(out / "summary.txt"),
            "failures": sum(len(r.failures) for r in runs), "plots": [str(p) for p in plots]}


def _spec_dict(spec) -> dict:
    import numpy as np

    d = {}
    for f in fields(spec):
        v = getattr(spec, f.name)
        d[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
    return d


def cmd_plot(args) -> dict:
    import warnings

    from .bench import emit_plots

    runs, traces = _bench_runs_from_dir(Path(args.bench_dir))
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        plots = emit_plots(runs, Path(args.out) if args.out else Path(args.bench_dir), traces)
    for w in rec:
        _log(f"warning: {w.message}")
    return {"plots": [str(p) for p in plots]}


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmnlvi", description=__doc__.split("\n")[0])
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread count (default: all cores); bit-identity only holds at a fixed count")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a dataset and its ground-truth sidecar")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--N", type=int)
    g.add_argument("--T", type=int)
    g.add_argument("--seed", type=int)

    f = sub.add_parser("fit", help="fit one method to a dataset")
    f.add_argument("method", choices=FIT_METHODS)
    f.add_argument("dataset")
    f.add_argument("--config")
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--flow", help="e.g. zeta:sylvester:4")
    f.add_argument("--seed", type=int)
    f.add_argument("--desk", action="store_true", help="use the benchmark learning-rate schedule")
    f.add_argument("--no-timing", action="store_true", help="zero wall-clock fields for byte-identical reports")

    r = sub.add_parser("predict", help="encode a dataset with a trained inference network")
    r.add_argument("weights")
    r.add_argument("dataset")
    r.add_argument("--out", required=True, help="posterior CSV path")

    b = sub.add_parser("bench", help="repeated-run benchmark with tables and plots")
    b.add_argument("--config")
    b.add_argument("--out")
    b.add_argument("--seed", type=int)
    b.add_argument("--reps", type=int)
    b.add_argument("--paper-table1-desk", action="store_true")
    b.add_argument("--paper-table3-desk", action="store_true")
    b.add_argument("--no-timing", action="store_true")
    b.add_argument("--quiet", action="store_true")

    pl = sub.add_parser("plot", help="redraw plots from a bench output directory")
    pl.add_argument("bench_dir")
    pl.add_argument("--out")
    return p


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "predict": cmd_predict, "bench": cmd_bench,
            "plot": cmd_plot}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: " + json.dumps({"command": args.command, "type": "ConfigError",
                                          "message": "--threads must be >= 1"}), file=sys.stderr)
            return 2
        # only effective when set before numpy loads its BLAS
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    if args.command == "bench" and args.paper_table1_desk and args.paper_table3_desk:
        print("error: " + json.dumps({"command": "bench", "type": "ConfigError",
                                      "message": "choose one preset"}), file=sys.stderr)
        return 2
    try:
        result = COMMANDS[args.command](args)
    except Exception as exc:
        print("error: " + json.dumps({"command": args.command, "type": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
