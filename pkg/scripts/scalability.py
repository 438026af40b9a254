"""Wall time of AVI (fixed epochs and batch) and MSLE (to convergence) against N (Fig. 3 analogue).

    python scripts/scalability.py --Ns 500 2000 5000 --out results/scalability
"""
import argparse
import csv
from pathlib import Path

from mmnlvi.bench import _svg_setup
from mmnlvi.experiments import check_timing, exp_timing

p = argparse.ArgumentParser()
p.add_argument("--Ns", type=int, nargs="+", default=[500, 2000, 5000])
p.add_argument("--epochs", type=int, default=20)
p.add_argument("--batch", type=int, default=500)
p.add_argument("--out", default="results/scalability")
a = p.parse_args()

res = exp_timing(a.Ns, epochs=a.epochs, batch=a.batch, log=print)
out = Path(a.out)
out.mkdir(parents=True, exist_ok=True)
with open(out / "timing.csv", "w", newline="") as fh:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["N", "avi_s", "msle_s", "msle_iters"])
    for r in res["rows"]:
        w.writerow([r["N"], repr(r["avi_s"]), repr(r["msle_s"]), r["msle_iters"]])
plt = _svg_setup()
fig, ax = plt.subplots(figsize=(5, 3.5))
Ns = [r["N"] for r in res["rows"]]
ax.plot(Ns, [r["avi_s"] for r in res["rows"]], marker="o", label=f"AVI ({a.epochs} epochs)")
ax.plot(Ns, [r["msle_s"] for r in res["rows"]], marker="o", label="MSLE (to convergence)")
ax.set_xlabel("N")
ax.set_ylabel("runtime (s)")
ax.legend()
fig.tight_layout()
fig.savefig(out / "timing.svg", format="svg", metadata={"Date": None})
print(check_timing(res)[1])
