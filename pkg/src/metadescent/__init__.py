"""Overfitted one-step MAML for linear regression with Gaussian features.

Sampling, the stacked meta system, min-norm / ideal / least-squares solvers,
closed-form expectations and bounds, and seeded Monte-Carlo sweeps.
"""
from .task_gen import ConfigError, MetaConfig, RngStream, TaskBatch, TestTask, w0_uniform
from .maml_core import MetaSystem, build_meta_system, meta_loss
from .solvers import DegenerateSystemError, SolveReport, solve, solve_ideal, solve_min_l2, solve_underparameterized
from .theory_bounds import BoundReport, approx_bound, bound_stack, descent_floor, f_test
from .experiments import SweepPlan, SweepRecord, run_replicate, run_sweep

__version__ = "0.1.0"
