"""The p = s = 1 case: least squares instead of interpolation."""
import math

import numpy as np

from metadescent import theory_bounds as tb
from metadescent.experiments import run_replicate
from metadescent.task_gen import MetaConfig

cfg = MetaConfig(p=1, s=1, m=10, n_t=50, n_v=3, nu=60 / math.sqrt(5), sigma=0.0, alpha_t=0.0, w0_s=np.array([10.0]))
vals = [run_replicate(cfg, 3, r, ("model_error_underparam",)).values["model_error_underparam"] for r in range(2000)]
mean, se = np.mean(vals), np.std(vals, ddof=1) / math.sqrt(len(vals))

# With alpha_t = 0 the estimate is a chi-square weighted mean of the task truths,
# so its error has mean nu^2 (n_v+2)/(m n_v+2). The leading-order approximation
# nu^2/m ignores the weighting and comes out about a third low at n_v = 3.
exact = cfg.nu_total**2 * (cfg.n_v + 2) / (cfg.mn_v + 2)
print(f"simulated  {mean:8.2f} +- {se:.2f}")
print(f"exact mean {exact:8.2f}")
print(f"approx     {tb.underparam_p1_approx(cfg):8.2f}")
print("high-probability bracket", tb.underparam_p1_bracket(cfg))

