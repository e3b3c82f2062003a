"""How large a step to take on the new task."""
import numpy as np

from metadescent import theory_bounds as tb
from metadescent.task_gen import MetaConfig

# Expected test error is a quadratic in alpha_r. Without test noise its
# minimizer is n_r/(n_r+p+1) whatever the model error is.
cfg = MetaConfig(p=200, s=5, m=10, n_t=50, n_v=3, n_r=10, nu_r=5.0)
zeta = 12.0
alphas = np.linspace(0, 0.2, 9)
for a in alphas:
    print(f"alpha_r={a:.3f}  f_test={tb.f_test(tb.TestErrorParams.from_config(zeta, cfg, a)):9.3f}")
best, _ = tb.optimal_alpha_r(zeta, cfg)
print("optimal", best, "practical rule", cfg.n_r / (cfg.n_r + cfg.p + 1))

# With noisy test labels the best step shrinks toward zero.
for sigma_r in (0.0, 1.0, 5.0, 25.0):
    print(f"sigma_r={sigma_r:5.1f}  optimal alpha_r={tb.optimal_alpha_r(zeta, cfg.with_(sigma_r=sigma_r))[0]:.5f}")
