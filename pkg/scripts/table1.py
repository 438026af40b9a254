"""Table 1 at desk scale (N=500/T=5 and N=2000/T=10, 10 reps) or at the full table shapes.

    python scripts/table1.py --out results/table1
    python scripts/table1.py --out results/table1-full --full   # N up to 50000, 30 reps; days on one core
"""
import argparse
import json
import sys
import tempfile
from pathlib import Path

from mmnlvi import cli

FULL = {"scenarios": [{"N": 500, "T": 5}] + [{"N": n, "T": 10} for n in (2000, 5000, 10**4, 5 * 10**4)],
        "methods": ["MSLE", "SVI", "AVI", "AVI2"], "repetitions": 30}

p = argparse.ArgumentParser()
p.add_argument("--out", default="results/table1")
p.add_argument("--reps", type=int)
p.add_argument("--seed", type=int, default=0)
p.add_argument("--full", action="store_true")
p.add_argument("--no-timing", action="store_true")
a = p.parse_args()

argv = ["bench", "--out", a.out, "--seed", str(a.seed)]
if a.full:
    cfg = Path(tempfile.mkdtemp()) / "table1-full.json"
    cfg.write_text(json.dumps({"bench": FULL}))
    argv += ["--config", str(cfg)]
else:
    argv.append("--paper-table1-desk")
if a.reps:
    argv += ["--reps", str(a.reps)]
if a.no_timing:
    argv.append("--no-timing")
code = cli.main(argv)
if code == 0:
    print(Path(a.out, "summary.txt").read_text())
sys.exit(code)
