"""The bound stack, its leading-order approximation, and the descent floor."""
import numpy as np

from metadescent import theory_bounds as tb
from metadescent.experiments import fig1_config

# Full bound at a descent-curve size: evaluated, but flagged. Desk sizes are far below
# the regime where it is informative, and the probability budget exceeds 1.
cfg = fig1_config("c", p=1000)
rep = tb.bound_stack(cfg)
for name, symbol in tb.BOUND_SYMBOLS.items():
    print(f"{symbol:<18} {getattr(rep, name)}")
print("flags:", rep.flags)

# The approximation keeps only the dominating terms and is what tracks simulations.
c = tb.DEFAULT_CONSTANTS
for p in (35, 40, 60, 100, 1000):
    ab = tb.approx_bound(cfg.with_(p=p), **c)
    print(f"p={p:<5d} b_w0={ab.b_w0:8.3f}  b_ideal={ab.b_w_ideal:8.3f}  b_w={ab.b_w:8.3f}")

# Where does the approximate curve bottom out? Closed form against brute force.
for cid in ("a", "b", "c", "d"):
    cfg = fig1_config(cid)
    b_delta = tb.approx_b_delta(cfg, c["C1"], c["C2"], c["C3"])
    fl = tb.descent_floor(cfg, c["C4"], b_delta)
    if fl.monotone_decreasing:
        print(cid, f"g={fl.g:.3g}: keeps decreasing")
        continue
    p = np.linspace(c["C4"] * cfg.mn_v + 1e-6, 10 * fl.p_star, 200_001)
    brute = p[np.argmin(tb.approx_curve(p, cfg.mn_v, cfg.w0_norm_sq, b_delta, c["C4"]))]
    print(cid, f"g={fl.g:.3g}: floor at p*={fl.p_star:.3f} (grid says {brute:.3f}), value {fl.floor_value:.3f}")
