"""Run the desk-scale acceptance experiments and print one verdict per criterion.

    MMNLVI_ACCEPTANCE_CACHE=results/acceptance python scripts/run_acceptance.py [name ...]

With the cache variable set, results are stored as JSON and reused by
tests/test_acceptance.py; without it everything is recomputed.
"""
import argparse
import time

from mmnlvi import acceptance as A
from mmnlvi import experiments as E

CHECKS = {
    "table1": ("1", E.check_table1),
    "flows": ("7", E.check_flows),
    "convergence": ("5", E.check_convergence),
    "svi_vs_avi": ("4", E.check_svi_vs_avi),
    "generalization": ("6", E.check_generalization),
    "timing": ("8", E.check_timing),
}

p = argparse.ArgumentParser()
p.add_argument("names", nargs="*", default=list(A.PLAN))
args = p.parse_args()
for name in args.names:
    t0 = time.perf_counter()
    res = A.result(name)
    took = time.perf_counter() - t0
    if name in CHECKS:
        crit, check = CHECKS[name]
        ok, detail = check(res)
        print(f"criterion {crit} ({name}): {'PASS' if ok else 'FAIL'} [{took:.0f}s] {detail}", flush=True)
    if name == "agreement2000":
        ok, detail = E.check_agreement({500: A.result("table1", quiet=True), 2000: res})
        print(f"criterion 2 (agreement): {'PASS' if ok else 'FAIL'} [{took:.0f}s] {detail}", flush=True)
