"""Acceptance experiments at their desk-scale settings, shared by tests and scripts."""
from __future__ import annotations

import os
import sys

from . import experiments as E

# name -> (driver, params, checker); criterion 2 reuses criterion 1's N=500 runs
PLAN = {
    "table1": (E.exp_table1, {"N": 500, "T": 5, "reps": 10, "seed": 0}),
    "flows": (E.exp_flows, {"N": 500, "T": 5, "reps": 10, "seed": 400}),
    "agreement2000": (E.exp_table1, {"N": 2000, "T": 10, "reps": 3, "seed": 50, "methods": ["MSLE", "SVI", "AVI"]}),
    "convergence": (E.exp_convergence, {"N": 5000, "T": 5, "epochs": 300, "reps": 10, "seed": 200}),
    "svi_vs_avi": (E.exp_svi_vs_avi, {"N": 10**4, "T": 5, "epochs": 200, "batch": 2000, "reps": 10, "seed": 100}),
    "generalization": (E.exp_generalization, {"Ns": [500, 2000, 10**4], "T": 10, "reps": 10, "steps": 1000,
                                              "seed": 300}),
    "timing": (E.exp_timing, {"Ns": [500, 2000, 5000], "T": 5, "epochs": 20, "batch": 500, "repeats": 3,
                              "seed": 500}),
}


def cache_dir():
    """Result cache location; MMNLVI_ACCEPTANCE_CACHE unset means always recompute."""
    return os.environ.get("MMNLVI_ACCEPTANCE_CACHE") or None


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def result(name: str, quiet: bool = False):
    fn, params = PLAN[name]
    return E.cached(name, params, lambda **p: fn(**p, log=None if quiet else log), cache_dir(), log)
