"""Print a compact comparison table from the outputs of reproduce.sh."""

import csv
import json
import sys
from pathlib import Path

import numpy as np

from pmfvb.engine import RunTrace, smoothed_non_decreasing


def load(path):
    return json.loads(Path(path).read_text())


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def main(out):
    out = Path(out)
    toy = load(out / "toy/metrics.json")
    print(f"toy: block means {np.round(toy['block_means'], 3)} vars {np.round(toy['block_vars'], 3)}"
          f" (optimum {toy['oracle_means']} {toy['oracle_vars']})")

    pm, mala = load(out / "logistic/metrics.json"), load(out / "logistic-mala/metrics.json")
    print("logistic     " + " ".join(f"beta{j:<7}" for j in range(len(pm["mean"]))))
    for name, m in (("pmfvb", pm), ("mala", mala)):
        print(f"  {name:5} mean " + " ".join(f"{v:8.3f}" for v in m["mean"]))
        print(f"  {name:5} sd   " + " ".join(f"{v:8.3f}" for v in m["sd"]))

    sv_mala = load(out / "sv-mala/metrics.json")
    cells = [Path(r["out"]) for r in rows(out / "sv-seeds/cells.csv") if r["status"] == "ok"]
    sv = [load(c / "metrics.json") for c in cells]
    mono = sum(smoothed_non_decreasing(RunTrace.from_csv(c / "trace.csv").lower_bounds) for c in cells)
    for k in ("mu", "phi", "sigma2"):
        q = np.array([m["mean"][k] for m in sv])
        qv = np.array([m["var"][k] for m in sv])
        print(f"sv {k:6}: q mean {q.mean():.3f} (sd {q.std():.3f}) q var {qv.mean():.2e}"
              f" | mala mean {sv_mala['mean'][k]:.3f} var {sv_mala['var'][k]:.2e}")
    print(f"sv: smoothed bound non-decreasing after burn-in in {mono}/{len(cells)} seeds")

    for name, keys in (("nn-regression", ("mse", "pps", "wall_minutes")), ("nn-census", ("mcr", "pps", "wall_minutes"))):
        path = out / name / "summary.csv"
        if not path.exists():
            continue
        for r in rows(path):
            vals = " ".join(f"{k} {float(r[k + ':mean']):.4f} ({float(r[k + ':sd']):.4f})" for k in keys)
            print(f"{name} {r['param:method']:9}: {vals}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "results")
