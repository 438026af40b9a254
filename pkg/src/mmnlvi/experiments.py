"""Desk-scale experiment drivers behind the acceptance suite and scripts/.

Each ``exp_*`` function returns plain JSON-serializable results; the ``check_*``
functions turn them into (passed, detail) verdicts. ``cached`` memoizes results
on disk keyed by experiment name and parameters.
"""
from __future__ import annotations

import hashlib
import json
import statistics
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .amortization import InferenceNetwork, predict_out_of_sample
from .bench import desk_fit_config, epochs_to_within, run_benchmark
from .datagen import ScenarioSpec, simulate
from .model import PriorConfig
from .msle import MsleConfig, fit_msle
from .vi import FitConfig, VariationalState, fit


def cached(name: str, params: dict, fn, cache_dir=None, log=None):
    """Run ``fn(**params)`` or load its JSON result from ``cache_dir``."""
    if cache_dir is None:
        return fn(**params)
    key = hashlib.sha256(json.dumps({"name": name, "version": __version__, **params}, sort_keys=True)
                         .encode()).hexdigest()[:16]
    path = Path(cache_dir) / f"{name}-{key}.json"
    if path.exists():
        if log:
            log(f"{name}: cached result {path}")
        return json.loads(path.read_text())["result"]
    out = fn(**params)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"name": name, "params": params, "result": out}, indent=1, sort_keys=True) + "\n")
    return out


def _rows(runs) -> list[dict]:
    return [r for run in runs for r in run.rows]


def _failures(runs) -> list[dict]:
    return [f for run in runs for f in run.failures]


def _mean(rows, method, key):
    vals = [r[key] for r in rows if r["method"] == method]
    return float(np.mean(vals)) if vals else float("nan")


# -- 1 / 2: Table-1 scenario and method agreement ------------------------------------


def exp_table1(N: int = 500, T: int = 5, reps: int = 10, seed: int = 0,
               methods=("MSLE", "SVI", "AVI", "AVI2"), log=None) -> dict:
    runs = run_benchmark([ScenarioSpec(N, T)], list(methods), reps, seed=seed, log=log)
    return {"rows": _rows(runs), "failures": _failures(runs)}


BANDS = {"rmse_alpha": (0.03, 0.15), "rmse_zeta": (0.03, 0.16), "rmse_beta": (0.70, 0.90),
         "rmse_omega": (0.10, 0.45)}


def check_table1(res: dict) -> tuple[bool, str]:
    ok, parts = True, []
    for m in ("MSLE", "SVI", "AVI", "AVI2"):
        cells = []
        for key, (lo, hi) in BANDS.items():
            v = _mean(res["rows"], m, key)
            inside = lo <= v <= hi
            ok &= inside
            cells.append(f"{key[5:]}={v:.3f}{'' if inside else '(out)'}")
        parts.append(f"{m}: " + " ".join(cells))
    ok &= not res["failures"]
    return ok, "; ".join(parts)


def check_agreement(results: dict[int, dict], tol: float = 0.01) -> tuple[bool, str]:
    """Every rep: |simloglik(X) - simloglik(MSLE)| / |simloglik(MSLE)| <= tol for X in SVI, AVI."""
    ok, parts = True, []
    for N, res in sorted(results.items()):
        by = {(r["method"], r["rep"]): r["simloglik"] for r in res["rows"]}
        reps = sorted({rep for (m, rep) in by if m == "MSLE"})
        if not reps:
            return False, f"N={N}: no MSLE results"
        for m in ("SVI", "AVI"):
            rel = [abs(by[(m, k)] - by[("MSLE", k)]) / abs(by[("MSLE", k)]) for k in reps if (m, k) in by]
            if len(rel) != len(reps):
                ok = False
            worst = max(rel) if rel else float("nan")
            ok &= worst <= tol
            parts.append(f"N={N} {m}: worst rel diff {worst:.4%} over {len(rel)} reps")
    return ok, "; ".join(parts)


# -- 3: parameter counts ----------------------------------------------------------------


def exp_param_counts(K: int = 5, L: int = 3, J: int = 5, Ns=(100, 10**4)) -> dict:
    out = {}
    for method in ("SVI", "AVI", "AVI2"):
        counts = []
        for N in Ns:
            local = InferenceNetwork(J, K, L, variant=method) if method != "SVI" else None
            counts.append(VariationalState(L, K, N, method, local=local).n_learnable())
        out[method] = counts
    out["Ns"] = list(Ns)
    out["K"] = K
    return out


def check_param_counts(res: dict) -> tuple[bool, str]:
    K = res["K"]
    n0, n1 = res["Ns"]
    want = (n1 - n0) * (K + K * (K + 1) // 2)
    svi = res["SVI"][1] - res["SVI"][0]
    ok = res["AVI"][0] == res["AVI"][1] and res["AVI2"][0] == res["AVI2"][1] and svi == want
    return ok, (f"counts at N={n0}/{n1}: AVI {res['AVI']}, AVI2 {res['AVI2']}, SVI {res['SVI']} "
                f"(SVI growth {svi}, expected {want})")


# -- 4: SVI vs AVI at N = 10^4 -------------------------------------------------------------


def exp_svi_vs_avi(N: int = 10**4, T: int = 5, epochs: int = 200, batch: int = 2000, reps: int = 10,
                   seed: int = 100, log=None) -> dict:
    fc = desk_fit_config(N, max_epochs=epochs, batch_size=batch)
    runs = run_benchmark([ScenarioSpec(N, T)], ["SVI", "AVI"], reps, seed=seed, fit_config=fc,
                         msle_config=MsleConfig(), log=log)
    return {"rows": _rows(runs), "failures": _failures(runs), "epochs": epochs}


def check_svi_vs_avi(res: dict) -> tuple[bool, str]:
    rows = res["rows"]
    beta_avi, beta_svi = _mean(rows, "AVI", "rmse_beta"), _mean(rows, "SVI", "rmse_beta")
    by = {(r["method"], r["rep"]): r for r in rows}
    reps = sorted({rep for (_, rep) in by})
    wins = sum(1 for k in reps if ("AVI", k) in by and ("SVI", k) in by
               and by[("AVI", k)]["rmse_omega"] <= 0.6 * by[("SVI", k)]["rmse_omega"])
    ok = beta_avi <= beta_svi and wins >= 8
    om = f"Omega AVI/SVI {_mean(rows, 'AVI', 'rmse_omega'):.3f}/{_mean(rows, 'SVI', 'rmse_omega'):.3f}"
    return ok, f"mean RMSE beta AVI {beta_avi:.3f} vs SVI {beta_svi:.3f}; {om}; Omega ratio <= 0.6 in {wins}/{len(reps)}"


# -- 5: convergence ordering ------------------------------------------------------------------


def exp_convergence(N: int = 5000, T: int = 5, epochs: int = 300, reps: int = 10, seed: int = 200,
                    log=None) -> dict:
    fc = desk_fit_config(N, max_epochs=epochs)
    runs = run_benchmark([ScenarioSpec(N, T)], ["SVI", "AVI"], reps, seed=seed, fit_config=fc,
                         trace_every=1, log=log)
    traces = {f"{m}/{rep}": tr for run in runs for (m, rep), tr in run.traces.items()}
    return {"rows": _rows(runs), "failures": _failures(runs), "traces": traces}


def check_convergence(res: dict, frac: float = 0.05) -> tuple[bool, str]:
    tr = res["traces"]
    reps = sorted({int(k.split("/")[1]) for k in tr})
    wins, pairs = 0, []
    for k in reps:
        if f"AVI/{k}" not in tr or f"SVI/{k}" not in tr:
            continue
        a = epochs_to_within([tuple(x) for x in tr[f"AVI/{k}"]], frac)
        s = epochs_to_within([tuple(x) for x in tr[f"SVI/{k}"]], frac)
        wins += a <= s / 3
        pairs.append(f"{a}/{s}")
    return wins >= 8, f"AVI/SVI epochs to within 5% of final: {' '.join(pairs)}; AVI <= SVI/3 in {wins}/{len(reps)}"


# -- 6: out-of-sample generalization -------------------------------------------------------------


def exp_generalization(Ns=(500, 2000, 10**4), T: int = 10, reps: int = 10, steps: int = 1000, seed: int = 300,
                       method: str = "AVI2", log=None) -> dict:
    """Train on one dataset, encode a fresh dataset of the same size from the same process."""
    out = []
    for rep in range(reps):
        for N in Ns:
            spec = ScenarioSpec(N, T, seed=seed + rep)
            train, truth = simulate(spec)
            test, test_truth = simulate(replace(spec, seed=seed + rep + 10**6))
            batch = min(N, 2000)
            fc = desk_fit_config(N, method=method, max_epochs=max(1, steps * batch // N),
                                 seed=seed + rep, record_timing=False)
            rep_fit = fit(train, PriorConfig.default(train.L, train.K), fc)
            net = rep_fit.state.local
            alpha = rep_fit.summary.means["alpha"]
            tr = predict_out_of_sample(net, train, alpha, truth.betas)
            te = predict_out_of_sample(net, test, alpha, test_truth.betas)
            row = {"rep": rep, "N": N, "train_rmse_beta": tr.metrics["rmse_beta"],
                   "test_rmse_beta": te.metrics["rmse_beta"], "train_accuracy": tr.metrics["accuracy"],
                   "test_accuracy": te.metrics["accuracy"], "train_loglik": tr.metrics["loglik"],
                   "test_loglik": te.metrics["loglik"]}
            out.append(row)
            if log:
                log(f"generalization rep {rep} N={N}: train {row['train_rmse_beta']:.4f} "
                    f"test {row['test_rmse_beta']:.4f}")
    return {"rows": out, "Ns": list(Ns)}


def check_generalization(res: dict) -> tuple[bool, str]:
    Ns = res["Ns"]
    gaps: dict[int, dict[int, float]] = {}
    for r in res["rows"]:
        gaps.setdefault(r["rep"], {})[r["N"]] = r["test_rmse_beta"] - r["train_rmse_beta"]
    wins = sum(1 for g in gaps.values() if all(g[a] > g[b] for a, b in zip(Ns, Ns[1:])))
    mean_gap = {N: float(np.mean([g[N] for g in gaps.values()])) for N in Ns}
    desc = ", ".join(f"N={N}: {v:.4f}" for N, v in mean_gap.items())
    return wins >= 8, f"mean train-test gap {desc}; strictly decreasing in {wins}/{len(gaps)} reps"


# -- 7: flows on the LogNormal scenario ------------------------------------------------------------


def exp_flows(N: int = 500, T: int = 5, reps: int = 10, seed: int = 400, log=None) -> dict:
    runs = run_benchmark([ScenarioSpec(N, T, zeta_dist="lognormal")], ["SVI-LN", "SVI", "SVI-NF"], reps,
                         seed=seed, log=log)
    return {"rows": _rows(runs), "failures": _failures(runs)}


def check_flows(res: dict) -> tuple[bool, str]:
    rows = res["rows"]
    nf, nor, ln = (_mean(rows, m, "loglik") for m in ("SVI-NF", "SVI", "SVI-LN"))
    ok = nf >= nor >= ln and nf - nor > 0 and not res["failures"]
    sim = ", ".join(f"{m} {_mean(rows, m, 'simloglik'):.1f}" for m in ("SVI-NF", "SVI", "SVI-LN"))
    return ok, f"mean loglik NF {nf:.1f}, Normal {nor:.1f}, LogNormal {ln:.1f} (sim. loglik {sim})"


# -- 8: scalability ------------------------------------------------------------------------------


def exp_timing(Ns=(500, 2000, 5000), T: int = 5, epochs: int = 20, batch: int = 500, repeats: int = 3,
               seed: int = 500, log=None) -> dict:
    """AVI at fixed epochs and batch (median of ``repeats``) and MSLE run to convergence."""
    out = []
    for N in Ns:
        ds, _ = simulate(ScenarioSpec(N, T, seed=seed))
        prior = PriorConfig.default(ds.L, ds.K)
        fc = FitConfig(method="AVI", batch_size=batch, max_epochs=epochs, patience=10**9, lr=0.01, seed=seed,
                       n_summary_draws=100)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fit(ds, prior, fc)
            times.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        _, mrep = fit_msle(ds, MsleConfig(seed=seed))
        t_msle = time.perf_counter() - t0
        row = {"N": N, "avi_s": statistics.median(times), "msle_s": t_msle, "msle_iters": mrep.n_epochs}
        out.append(row)
        if log:
            log(f"timing N={N}: AVI {row['avi_s']:.2f}s MSLE {t_msle:.1f}s ({mrep.n_epochs} iters)")
    return {"rows": out, "epochs": epochs, "batch": batch}


def check_timing(res: dict, slack: float = 1.1) -> tuple[bool, str]:
    """AVI time per unit N must not grow (10% slack for timer noise); MSLE/AVI ratio strictly increasing."""
    rows = res["rows"]
    per_n = [r["avi_s"] / r["N"] for r in rows]
    linear = all(b <= slack * a for a, b in zip(per_n, per_n[1:]))
    ratio = [r["msle_s"] / r["avi_s"] for r in rows]
    increasing = all(b > a for a, b in zip(ratio, ratio[1:]))
    desc = "; ".join(f"N={r['N']}: AVI {r['avi_s']:.2f}s, MSLE {r['msle_s']:.1f}s ({r['msle_iters']} it), "
                     f"ratio {q:.1f}" for r, q in zip(rows, ratio))
    return linear and increasing, desc


# -- 10: determinism ---------------------------------------------------------------------------------


def exp_determinism(work_dir) -> dict:
    """Run generate, fit and bench twice through the CLI and compare output bytes."""
    import contextlib
    import io

    from . import cli

    work = Path(work_dir)
    cfg = work / "cfg.json"
    work.mkdir(parents=True, exist_ok=True)
    cfg.write_text(json.dumps({"seed": 7, "scenario": {"N": 60, "T": 4},
                               "fit": {"max_epochs": 30, "n_summary_draws": 100},
                               "msle": {"n_draws": 20, "max_iter": 30, "n_cond_draws": 100},
                               "bench": {"scenarios": [{"N": 40, "T": 3}, {"N": 60, "T": 3}],
                                         "methods": ["MSLE", "SVI", "AVI"], "repetitions": 2,
                                         "trace_every": 5}}))
    codes = []
    for run in ("a", "b"):
        d = work / run
        with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()):
            codes.append(cli.main(["generate", "--config", str(cfg), "--out", str(d / "data.csv")]))
            for m in ("svi", "avi2", "msle"):
                codes.append(cli.main(["fit", m, str(d / "data.csv"), "--config", str(cfg),
                                       "--out", str(d / f"fit-{m}"), "--no-timing"]))
            codes.append(cli.main(["bench", "--config", str(cfg), "--out", str(d / "bench"), "--no-timing",
                                   "--quiet"]))
    files = sorted(str(p.relative_to(work / "a")) for p in (work / "a").rglob("*") if p.is_file())
    diff = [f for f in files if not (work / "b" / f).exists()
            or (work / "a" / f).read_bytes() != (work / "b" / f).read_bytes()]
    return {"codes": codes, "files": files, "differing": diff}


def check_determinism(res: dict) -> tuple[bool, str]:
    ok = all(c == 0 for c in res["codes"]) and not res["differing"] and len(res["files"]) > 0
    return ok, f"{len(res['files'])} files compared, {len(res['differing'])} differ {res['differing']}; exit codes {res['codes']}"
