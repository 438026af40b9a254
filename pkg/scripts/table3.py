"""Table 3 at desk scale: LogNormal-zeta scenarios fitted with LogNormal, Normal and flow q(zeta).

    python scripts/table3.py --out results/table3 [--reps 10]
"""
import argparse
import sys
from pathlib import Path

from mmnlvi import cli

p = argparse.ArgumentParser()
p.add_argument("--out", default="results/table3")
p.add_argument("--reps", type=int)
p.add_argument("--seed", type=int, default=400)
a = p.parse_args()

argv = ["bench", "--paper-table3-desk", "--out", a.out, "--seed", str(a.seed)]
if a.reps:
    argv += ["--reps", str(a.reps)]
code = cli.main(argv)
if code == 0:
    print(Path(a.out, "summary.txt").read_text())
sys.exit(code)
