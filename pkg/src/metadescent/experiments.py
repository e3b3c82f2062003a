"""Seeded Monte-Carlo replicates, sweeps over p, and expectation audits."""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import maml_core, solvers, theory_bounds
from .task_gen import (
    ROLE_PROBE,
    TEST_TASK,
    ConfigError,
    MetaConfig,
    RngStream,
    sample_task_batch,
    sample_test_task,
    sample_truths,
    w0_uniform,
)

ESTIMANDS = (
    "model_error_l2",
    "model_error_ideal",
    "model_error_underparam",
    "term1",
    "term2",
    "test_error",
    "eig_min",
    "eig_max",
    "delta_gamma_sq",
    "meta_loss_residual",
)

FLAG_NOT_APPLICABLE = "not_applicable"
FLAG_INVALID = "invalid"
FLAG_SKIPS = "skipped_replicates"

THREADS_ENV = "METADESCENT_THREADS"


def default_workers() -> int:
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    n = int(raw)
    if n <= 0:
        return os.cpu_count() or 1
    return n


# --------------------------------------------------------------------------
# Replicates


@dataclass
class ReplicateResult:
    values: dict[str, float]
    skipped: str | None = None


def replicate_stream(seed: int, rep_index: int) -> RngStream:
    return RngStream(seed).child(rep_index)


def run_replicate(cfg: MetaConfig, seed: int, rep_index: int, estimands: Iterable[str] = ESTIMANDS) -> ReplicateResult:
    """Sample one instance, solve it in the regime-appropriate way, measure.

    Estimands that do not apply to the regime come back as NaN. A degenerate
    system yields a skipped replicate carrying the reason.
    """
    wanted = tuple(estimands)
    unknown = set(wanted) - set(ESTIMANDS)
    if unknown:
        raise ConfigError(f"unknown estimands: {sorted(unknown)}")
    rng = replicate_stream(seed, rep_index)
    truths, w_r = sample_truths(cfg, rng)
    batch = sample_task_batch(cfg, truths, rng)
    sys = maml_core.build_meta_system(batch, cfg)
    out = dict.fromkeys(wanted, math.nan)
    try:
        report = solvers.solve(sys)
        ideal = solvers.solve_ideal(sys) if sys.p >= sys.rows else None
    except solvers.DegenerateSystemError as exc:
        return ReplicateResult(out, skipped=str(exc))

    overparam = sys.p >= sys.rows
    measured = {
        "model_error_l2": report.model_error,
        "meta_loss_residual": maml_core.meta_loss(sys, report.w_hat),
        "delta_gamma_sq": float(sys.delta_gamma @ sys.delta_gamma),
    }
    if overparam:
        measured["model_error_ideal"] = ideal.model_error
        measured["term1"] = report.term1
        measured["term2"] = report.term2
        eig = sys.gram_eigvals
    else:
        measured["model_error_underparam"] = report.model_error
        eig = np.linalg.eigvalsh(sys.B.T @ sys.B)
    measured["eig_min"] = float(eig[0])
    measured["eig_max"] = float(eig[-1])
    if "test_error" in out:
        test = sample_test_task(cfg, w_r, rng)
        adapted = maml_core.adapt_test(report.w_hat, test, cfg)
        x = rng.role(TEST_TASK, ROLE_PROBE).standard_normal(cfg.p)
        measured["test_error"] = maml_core.test_error(x, test.w_r, adapted.w_adapted)
    for k in wanted:
        if k in measured:
            out[k] = measured[k]
    return ReplicateResult(out)


# --------------------------------------------------------------------------
# Sweeps


@dataclass(frozen=True)
class SweepPlan:
    base_cfg: MetaConfig
    p_grid: tuple[int, ...]
    replicates: int
    seed: int
    estimands: tuple[str, ...] = ESTIMANDS
    alpha_t_rule: str = "fixed"
    alpha_t_scale: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "p_grid", tuple(int(p) for p in self.p_grid))
        object.__setattr__(self, "estimands", tuple(self.estimands))
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if not self.p_grid:
            raise ConfigError("p_grid is empty")
        if len(set(self.p_grid)) != len(self.p_grid):
            raise ConfigError("p_grid has repeated values")
        if any(p < self.base_cfg.s for p in self.p_grid):
            raise ConfigError(f"every p must be >= s={self.base_cfg.s}")
        if self.alpha_t_rule not in ("fixed", "scaled"):
            raise ConfigError(f"alpha_t_rule must be 'fixed' or 'scaled', got {self.alpha_t_rule!r}")
        unknown = set(self.estimands) - set(ESTIMANDS)
        if unknown:
            raise ConfigError(f"unknown estimands: {sorted(unknown)}")

    def config_at(self, p: int) -> MetaConfig:
        alpha_t = self.alpha_t_scale / p if self.alpha_t_rule == "scaled" else self.base_cfg.alpha_t
        return self.base_cfg.with_(p=p, alpha_t=alpha_t)


@dataclass(frozen=True)
class SweepRecord:
    p: int
    estimand: str
    mean: float
    std: float
    stderr: float
    count: int
    replicates: int
    skips: int
    cfg: MetaConfig
    bounds: theory_bounds.BoundReport
    flags: tuple[str, ...] = field(default=())

    @property
    def valid(self) -> bool:
        return FLAG_INVALID not in self.flags


def summarize(values: Sequence[float]) -> tuple[float, float, float, int]:
    """Mean, sample std, standard error and count over the finite entries.

    Sums run in replicate order with ``math.fsum`` so the digits do not
    depend on how replicates were split across workers.
    """
    v = [float(x) for x in values if math.isfinite(x)]
    n = len(v)
    if n == 0:
        return math.nan, math.nan, math.nan, 0
    mean = math.fsum(v) / n
    if n == 1:
        return mean, 0.0, 0.0, 1
    std = math.sqrt(math.fsum((x - mean) ** 2 for x in v) / (n - 1))
    return mean, std, std / math.sqrt(n), n


def _run_chunk(args) -> list[ReplicateResult]:
    cfg, seed, reps, estimands = args
    return [run_replicate(cfg, seed, r, estimands) for r in reps]


def _chunks(n: int, parts: int) -> list[range]:
    parts = max(1, min(parts, n))
    edges = np.linspace(0, n, parts + 1).astype(int)
    return [range(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def replicate_values(plan: SweepPlan, workers: int | None = None) -> dict[int, list[ReplicateResult]]:
    """Raw per-replicate results for every p, ordered by replicate index."""
    workers = default_workers() if workers is None else max(1, int(workers))
    jobs = []
    for p in plan.p_grid:
        cfg = plan.config_at(p)
        for reps in _chunks(plan.replicates, workers):
            jobs.append((p, (cfg, plan.seed, reps, plan.estimands)))
    if workers == 1:
        results = [_run_chunk(a) for _, a in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chunk, [a for _, a in jobs]))
    out: dict[int, list[ReplicateResult]] = {p: [] for p in plan.p_grid}
    for (p, _), chunk in zip(jobs, results):
        out[p].extend(chunk)
    return out


def run_sweep(plan: SweepPlan, workers: int | None = None) -> list[SweepRecord]:
    raw = replicate_values(plan, workers)
    records = []
    for p in plan.p_grid:
        cfg = plan.config_at(p)
        bounds = theory_bounds.bound_stack(cfg)
        results = raw[p]
        skips = sum(r.skipped is not None for r in results)
        for name in plan.estimands:
            mean, std, se, n = summarize([r.values[name] for r in results if r.skipped is None])
            flags = []
            if skips:
                flags.append(FLAG_SKIPS)
            if skips == len(results):
                flags.append(FLAG_INVALID)
            elif n == 0:
                flags.append(FLAG_NOT_APPLICABLE)
            records.append(SweepRecord(p, name, mean, std, se, n, plan.replicates, skips, cfg, bounds, tuple(flags)))
    return records


def curve(records: Sequence[SweepRecord], estimand: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(p, mean, stderr)`` arrays for one estimand, in grid order."""
    rows = [r for r in records if r.estimand == estimand]
    return (
        np.array([r.p for r in rows]),
        np.array([r.mean for r in rows]),
        np.array([r.stderr for r in rows]),
    )


# --------------------------------------------------------------------------
# Descent-curve setup (five (nu, sigma) pairs, m=10, n_t=50, n_v=3, s=5)

#: (nu, sigma) for the five descent curves, largest first.
FIG1_CURVES = {
    "a": (60.0, 0.0),
    "b": (20.0, 2.0),
    "c": (2.0, 0.2),
    "d": (0.2, 0.02),
    "e": (0.0, 0.0),
}

#: Underparameterized points from p = s, then a grid that thickens near the
#: interpolation threshold m*n_v = 30 and spreads out towards p = 1000.
FIG1_P_GRID = (
    5, 10, 15, 20, 25, 28, 30,
    35, 36, 37, 38, 40, 42, 45, 50, 55, 60, 70, 80, 90, 100,
    120, 150, 200, 250, 300, 400, 500, 600, 700, 800, 900, 1000,
)


def fig1_config(curve_id: str, p: int = 1000, n_r: int = 10, sigma_r: float = 0.0, nu_r: float = 0.0) -> MetaConfig:
    nu, sigma = FIG1_CURVES[curve_id]
    return MetaConfig(
        p=p, s=5, m=10, n_t=50, n_v=3, n_r=n_r,
        sigma=sigma, sigma_r=sigma_r, alpha_t=0.02 / p,
        w0_s=w0_uniform(100.0, 5), nu=nu, nu_r=nu_r,
    )


def fig1_plan(curve_id: str, replicates: int = 100, seed: int = 2023, p_grid: Sequence[int] = FIG1_P_GRID,
              estimands: Sequence[str] = ("model_error_l2", "term1", "term2")) -> SweepPlan:
    return SweepPlan(
        base_cfg=fig1_config(curve_id),
        p_grid=tuple(p_grid),
        replicates=replicates,
        seed=seed,
        estimands=tuple(estimands),
        alpha_t_rule="scaled",
        alpha_t_scale=0.02,
    )


# --------------------------------------------------------------------------
# Audits


@dataclass(frozen=True)
class AuditRow:
    name: str
    empirical: float
    theoretical: float
    stderr: float
    replicates: int

    @property
    def z(self) -> float:
        diff = self.empirical - self.theoretical
        if self.stderr > 0:
            return diff / self.stderr
        return 0.0 if diff == 0 else math.copysign(math.inf, diff)


def audit_w_hat(cfg: MetaConfig, seed: int) -> np.ndarray:
    """A fixed meta parameter for test-error audits: ``w0`` plus a seeded offset."""
    offset = RngStream(seed).child(-7).generator().standard_normal(cfg.p)
    return cfg.w0 + offset / np.sqrt(cfg.p)


def audit_expectations(
    cfg: MetaConfig,
    replicates: int,
    seed: int = 0,
    alpha_r_values: Sequence[float] | None = None,
    xxxx_shape: tuple[int, int] = (5, 8),
    xxxx_draws: int = 100_000,
) -> list[AuditRow]:
    """Compare Monte-Carlo means with every exact expectation formula.

    Term 1 (needs ``p >= m n_v``), ``||delta gamma||^2``, the test error at a
    fixed meta parameter for each step size, and the fourth-moment identity
    (diagonal mean and worst off-diagonal entry).
    """
    rows = []
    if cfg.p >= cfg.mn_v:
        t1, dg = [], []
        for r in range(replicates):
            rng = replicate_stream(seed, r)
            truths, _ = sample_truths(cfg, rng)
            sys = maml_core.build_meta_system(sample_task_batch(cfg, truths, rng), cfg)
            t1.append(solvers.decompose_model_error(sys)[0])
            dg.append(float(sys.delta_gamma @ sys.delta_gamma))
        mean, _, se, n = summarize(t1)
        rows.append(AuditRow("term1", mean, theory_bounds.expected_term1(cfg), se, n))
    else:
        dg = []
        for r in range(replicates):
            rng = replicate_stream(seed, r)
            truths, _ = sample_truths(cfg, rng)
            sys = maml_core.build_meta_system(sample_task_batch(cfg, truths, rng), cfg)
            dg.append(float(sys.delta_gamma @ sys.delta_gamma))
    mean, _, se, n = summarize(dg)
    rows.append(AuditRow("delta_gamma_sq", mean, theory_bounds.expected_delta_gamma_sq(cfg), se, n))

    w_hat = audit_w_hat(cfg, seed)
    zeta = float((w_hat - cfg.w0) @ (w_hat - cfg.w0))
    if alpha_r_values is None:
        alpha_r_values = (0.0, cfg.n_r / (cfg.n_r + cfg.p + 1), 0.5)
    for a in alpha_r_values:
        tcfg = cfg.with_(alpha_r=float(a))
        errs = []
        for r in range(replicates):
            rng = replicate_stream(seed, r).child(1)
            _, w_r = sample_truths(tcfg, rng)
            test = sample_test_task(tcfg, w_r, rng)
            adapted = maml_core.adapt_test(w_hat, test, tcfg)
            x = rng.role(TEST_TASK, ROLE_PROBE).standard_normal(cfg.p)
            errs.append(maml_core.test_error(x, w_r, adapted.w_adapted))
        mean, _, se, n = summarize(errs)
        theory = theory_bounds.f_test(theory_bounds.TestErrorParams.from_config(zeta, tcfg))
        rows.append(AuditRow(f"test_error[alpha_r={a:.6g}]", mean, theory, se, n))

    n_x, p_x = xxxx_shape
    gen = RngStream(seed).child(-8).generator()
    mc_mean, mc_se = theory_bounds.xxxx_monte_carlo(n_x, p_x, xxxx_draws, gen)
    target = theory_bounds.xxxx_identity(n_x, p_x)
    diag = np.diag(mc_mean)
    rows.append(AuditRow("xxxx_diag_mean", float(diag.mean()), float(target[0, 0]),
                         float(np.sqrt(np.sum(np.diag(mc_se) ** 2)) / p_x), xxxx_draws))
    off = ~np.eye(p_x, dtype=bool)
    worst = int(np.argmax(np.abs(mc_mean[off])))
    rows.append(AuditRow("xxxx_offdiag_worst", float(mc_mean[off][worst]), 0.0, float(mc_se[off][worst]), xxxx_draws))
    return rows


# --------------------------------------------------------------------------
# Instance-wise algebraic identities


@dataclass(frozen=True)
class IdentityCheck:
    pythagoras_rel: float
    interpolation_rel: float
    ideal_gap: float
    sandwich_ok: bool
    delta_gamma_abs: float

    def passes(self, tol: float = 1e-8) -> bool:
        return (
            self.pythagoras_rel <= tol
            and self.interpolation_rel <= tol
            and self.ideal_gap >= -tol
            and self.sandwich_ok
            and self.delta_gamma_abs <= tol
        )


def check_identities(sys: maml_core.MetaSystem) -> IdentityCheck:
    l2 = solvers.solve_min_l2(sys)
    ideal = solvers.solve_ideal(sys)
    err = l2.model_error
    pyth = abs(l2.term1 + l2.term2 - err) / err if err > 0 else abs(l2.term1 + l2.term2)
    g_norm = np.linalg.norm(sys.gamma)
    interp = l2.interpolation_residual / g_norm if g_norm > 0 else l2.interpolation_residual
    eig = sys.gram_eigvals
    dg2 = float(sys.delta_gamma @ sys.delta_gamma)
    slack = 1e-9 * max(l2.term2, dg2 / eig[0], 1e-300)
    sandwich = dg2 / eig[-1] - slack <= l2.term2 <= dg2 / eig[0] + slack
    scale = max(np.linalg.norm(sys.gamma), np.linalg.norm(sys.B @ sys.w0), 1.0)
    dg_abs = float(np.max(np.abs(sys.gamma - sys.B @ sys.w0 - sys.delta_gamma))) / scale
    return IdentityCheck(pyth, interp, (err - ideal.model_error) / max(err, 1e-300), bool(sandwich), dg_abs)


def random_instance(seed: int, index: int, p_range: tuple[int, int] | None = None) -> tuple[MetaConfig, maml_core.MetaSystem]:
    """A randomized overparameterized instance for identity and oracle suites."""
    gen = RngStream(seed).child(-9, index).generator()
    m = int(gen.integers(1, 6))
    n_v = int(gen.integers(1, 5))
    n_t = int(gen.integers(2, 40))
    mn_v = m * n_v
    lo, hi = p_range if p_range else (mn_v + 1, 4 * mn_v)
    s = int(gen.integers(1, min(5, hi) + 1))
    lo = max(lo, s, mn_v + 1)
    p = int(gen.integers(lo, max(hi, lo) + 1))
    cfg = MetaConfig(
        p=p, s=s, m=m, n_t=n_t, n_v=n_v,
        sigma=float(gen.uniform(0, 3)), alpha_t=float(gen.uniform(0, 0.5)) / p,
        w0_s=gen.normal(0, 3, s), nu=float(gen.uniform(0, 5)),
    )
    rng = RngStream(seed).child(-10, index)
    truths, _ = sample_truths(cfg, rng)
    sys = maml_core.build_meta_system(sample_task_batch(cfg, truths, rng), cfg)
    return cfg, sys


# --------------------------------------------------------------------------
# Tightness of the dominating-term approximation


@dataclass(frozen=True)
class TightnessRow:
    p: int
    simulated: float
    stderr: float
    approx: float

    @property
    def ratio(self) -> float:
        if self.approx == 0:
            return 1.0 if self.simulated == 0 else math.inf
        return self.simulated / self.approx


def tightness_comparison(records: Sequence[SweepRecord], C1: float = 0.001, C2: float = 0.99995,
                         C3: float = 0.001, C4: float = 0.99995, estimand: str = "model_error_l2") -> list[TightnessRow]:
    """Pair simulated model error with the approximate bound at each overparameterized p."""
    rows = []
    for r in records:
        if r.estimand != estimand or r.p <= r.cfg.mn_v:
            continue
        approx = theory_bounds.approx_bound(r.cfg, C1, C2, C3, C4)
        rows.append(TightnessRow(r.p, r.mean, r.stderr, approx.b_w))
    return rows


def run_tightness(cfg_grid: Sequence[MetaConfig], replicates: int, seed: int, C1: float = 0.001, C2: float = 0.99995,
                  C3: float = 0.001, C4: float = 0.99995) -> list[TightnessRow]:
    """Simulate each config and pair it with the approximate bound."""
    rows = []
    for cfg in cfg_grid:
        if cfg.p <= cfg.mn_v:
            continue
        vals = [run_replicate(cfg, seed, r, ("model_error_l2",)) for r in range(replicates)]
        mean, _, se, _ = summarize([v.values["model_error_l2"] for v in vals if v.skipped is None])
        rows.append(TightnessRow(cfg.p, mean, se, theory_bounds.approx_bound(cfg, C1, C2, C3, C4).b_w))
    return rows


def with_overrides(plan: SweepPlan, **changes) -> SweepPlan:
    return replace(plan, **changes)
