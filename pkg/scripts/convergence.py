"""RMSE beta_n per epoch for SVI and AVI on one scenario (Fig. 2 analogue), with plot and sidecar.

    python scripts/convergence.py --N 5000 --epochs 300 --reps 3 --out results/convergence
"""
import argparse
import warnings

from mmnlvi.bench import desk_fit_config, emit_plots, epochs_to_within, run_benchmark
from mmnlvi.datagen import ScenarioSpec

p = argparse.ArgumentParser()
p.add_argument("--N", type=int, default=5000)
p.add_argument("--T", type=int, default=5)
p.add_argument("--epochs", type=int, default=300)
p.add_argument("--reps", type=int, default=3)
p.add_argument("--seed", type=int, default=200)
p.add_argument("--out", default="results/convergence")
a = p.parse_args()

runs = run_benchmark([ScenarioSpec(a.N, a.T)], ["SVI", "AVI"], a.reps, seed=a.seed,
                     fit_config=desk_fit_config(a.N, max_epochs=a.epochs), trace_every=1, log=print)
with warnings.catch_warnings():
    warnings.simplefilter("ignore")  # a single scenario has no scalability plot
    emit_plots(runs, a.out)
for (m, rep), tr in sorted(runs[0].traces.items()):
    print(f"{m} rep {rep}: final RMSE beta {tr[-1][1]:.4f}, within 5% from epoch {epochs_to_within(tr)}")
