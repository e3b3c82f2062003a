"""Build one meta system by hand and poke at it."""
import numpy as np

from metadescent import maml_core, solvers
from metadescent.task_gen import MetaConfig, RngStream, sample_task_batch, sample_truths, w0_uniform

# Ten tasks, three validation points each, five true features padded out to p=60.
cfg = MetaConfig(p=60, s=5, m=10, n_t=50, n_v=3, sigma=2.0, nu=20.0, alpha_t=0.02 / 60, w0_s=w0_uniform(100.0, 5))
rng = RngStream(master_seed=1)
truths, _ = sample_truths(cfg, rng)
batch = sample_task_batch(cfg, truths, rng)
system = maml_core.build_meta_system(batch, cfg)
print("B is", system.shape, "- one block of n_v rows per task")

# Each block is V_i^T (I - (alpha_t/n_t) X_i X_i^T); rebuild the first one from scratch.
a = cfg.alpha_t / cfg.n_t
B0 = batch.V[0].T @ (np.eye(cfg.p) - a * batch.X[0] @ batch.X[0].T)
print("block 0 matches:", np.allclose(system.block(0)[0], B0))

# delta_gamma is what is left of gamma after the mean truth is explained.
print("|gamma|^2 =", round(system.gamma @ system.gamma, 1), " |delta_gamma|^2 =", round(system.delta_gamma @ system.delta_gamma, 1))

# p > m n_v, so the meta loss can be driven to zero. The min-norm interpolator does it.
rep = solvers.solve_min_l2(system)
print("meta loss at w_l2:", maml_core.meta_loss(system, rep.w_hat))
print("meta loss at w0:  ", maml_core.meta_loss(system, cfg.w0))

# Its distance to w0 splits into a projection part and a fluctuation part.
print(f"model error {rep.model_error:.3f} = term1 {rep.term1:.3f} + term2 {rep.term2:.3f}")

# The ideal interpolator knows w0 and pays only the fluctuation part.
print(f"ideal interpolator error {solvers.solve_ideal(system).model_error:.3f}")

# Dump B and gamma as plain text if you want to look at them elsewhere.
# maml_core.dump_system(system, "system.txt")
