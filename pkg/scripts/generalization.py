"""Train AVI2 and encode a fresh same-size test set (Table 2 analogue).

    python scripts/generalization.py --Ns 500 2000 10000 --reps 3
"""
import argparse

import numpy as np

from mmnlvi.experiments import check_generalization, exp_generalization

p = argparse.ArgumentParser()
p.add_argument("--Ns", type=int, nargs="+", default=[500, 2000, 10**4])
p.add_argument("--T", type=int, default=10)
p.add_argument("--reps", type=int, default=3)
p.add_argument("--steps", type=int, default=1000)
p.add_argument("--seed", type=int, default=300)
a = p.parse_args()

res = exp_generalization(a.Ns, T=a.T, reps=a.reps, steps=a.steps, seed=a.seed, log=print)
print("N | set | loglik | RMSE beta_n | accuracy")
for N in a.Ns:
    rows = [r for r in res["rows"] if r["N"] == N]
    for s in ("train", "test"):
        vals = [np.mean([r[f"{s}_{k}"] for r in rows]) for k in ("loglik", "rmse_beta", "accuracy")]
        print(f"{N} | {s} | {vals[0]:.0f} | {vals[1]:.3f} | {vals[2]:.3f}")
print(check_generalization(res)[1])
