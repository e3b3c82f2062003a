"""Model error against p for a few (nu, sigma) pairs, written to CSV.

Uses 20 replicates per point so it runs in well under a minute; the bundled
configs (``metadescent sweep fig1_a`` ...) use 100.
"""
import sys

import numpy as np

from metadescent import experiments as ex
from metadescent.cli_io import records_to_csv, write_text
from pathlib import Path

grid = (5, 10, 20, 28, 35, 40, 50, 70, 100, 200, 400, 1000)
curves = {}
for cid in ("a", "c", "e"):
    plan = ex.with_overrides(ex.fig1_plan(cid, replicates=20, p_grid=grid), estimands=("model_error_l2", "term1", "term2"))
    records = ex.run_sweep(plan)
    write_text(Path(f"descent_{cid}.csv"), records_to_csv(records))
    curves[cid] = ex.curve(records, "model_error_l2")

print("p      " + "".join(f"{'nu,sigma=' + str(ex.FIG1_CURVES[c]):>24}" for c in curves))
for k, p in enumerate(grid):
    print(f"{p:<6d} " + "".join(f"{curves[c][1][k]:>24.2f}" for c in curves))

# The largest-diversity curve keeps falling; the small ones bottom out just past m n_v = 30.
for cid, (p, mean, _) in curves.items():
    over = p > 30
    print(cid, "lowest overparameterized error at p =", p[over][np.argmin(mean[over])])

# Plotting recipe (matplotlib is not a package dependency):
try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    sys.exit(0)
fig, ax = plt.subplots(figsize=(6, 4))
for cid, (p, mean, se) in curves.items():
    ax.errorbar(p, mean, yerr=se, marker="o", ms=3, label=f"(nu, sigma) = {ex.FIG1_CURVES[cid]}")
ax.axvline(30, color="grey", lw=0.8, ls="--")
ax.set(xscale="log", yscale="log", xlabel="p", ylabel="||w_l2 - w0||^2")
ax.legend()
fig.tight_layout()
fig.savefig("descent_curves.png", dpi=120)
