"""Ground truths, Gaussian features and noise for linear meta-regression tasks.

Every random tensor is drawn from its own substream, keyed by
``(replicate, task, role)`` beneath a master seed, so a replicate never
depends on which worker ran it or on what was sampled before it.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

# Substream role tags. Test-task roles use task index -1.
ROLE_TRUTH = 0
ROLE_X = 1
ROLE_EPS = 2
ROLE_V = 3
ROLE_EPS_V = 4
ROLE_X_R = 5
ROLE_EPS_R = 6
ROLE_PROBE = 7
TEST_TASK = -1


class ConfigError(ValueError):
    """Raised for an inconsistent or out-of-range system configuration."""


@dataclass(frozen=True)
class MetaConfig:
    """Scalar parameters of the meta-learning system.

    ``nu`` describes task diversity: a scalar total standard deviation
    (spread uniformly as ``nu / sqrt(s)`` per coordinate), an ``(s,)`` vector
    of per-coordinate standard deviations shared by all tasks, or an
    ``(m, s)`` array giving one row per task. ``nu_r`` is the total
    fluctuation of the test-task truth, spread the same way.

    ``alpha_r=None`` means the practical rule ``n_r / (n_r + p + 1)``.
    """

    p: int
    s: int
    m: int
    n_t: int
    n_v: int
    n_r: int = 1
    sigma: float = 0.0
    sigma_r: float = 0.0
    alpha_t: float = 0.0
    alpha_r: float | None = None
    w0_s: np.ndarray = field(default=None)  # type: ignore[assignment]
    nu: float | np.ndarray = 0.0
    nu_r: float = 0.0

    def __post_init__(self):
        for name in ("p", "s", "m", "n_t", "n_v", "n_r"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.s > self.p:
            raise ConfigError(f"s={self.s} exceeds p={self.p}")
        for name in ("sigma", "sigma_r", "alpha_t", "nu_r"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.alpha_r is not None and not self.alpha_r >= 0:
            raise ConfigError("alpha_r must be nonnegative")
        w0_s = np.zeros(self.s) if self.w0_s is None else np.asarray(self.w0_s, dtype=float)
        if w0_s.shape != (self.s,):
            raise ConfigError(f"w0_s must have length s={self.s}, got shape {w0_s.shape}")
        object.__setattr__(self, "w0_s", w0_s)
        nu = np.asarray(self.nu, dtype=float)
        if nu.ndim == 0:
            nu = float(nu)
            if not nu >= 0:
                raise ConfigError("nu must be nonnegative")
        else:
            if nu.shape not in ((self.s,), (self.m, self.s)):
                raise ConfigError(f"nu must be scalar, ({self.s},) or ({self.m}, {self.s}); got {nu.shape}")
            if np.any(nu < 0) or not np.all(np.isfinite(nu)):
                raise ConfigError("per-coordinate diversities must be finite and nonnegative")
        object.__setattr__(self, "nu", nu)

    @property
    def mn_v(self) -> int:
        return self.m * self.n_v

    @property
    def overparameterized(self) -> bool:
        return self.p > self.mn_v

    @property
    def w0(self) -> np.ndarray:
        """Mean truth zero-padded to length p."""
        out = np.zeros(self.p)
        out[: self.s] = self.w0_s
        return out

    @property
    def w0_norm_sq(self) -> float:
        return float(self.w0_s @ self.w0_s)

    @property
    def nu_matrix(self) -> np.ndarray:
        """Per-task, per-coordinate standard deviations, shape ``(m, s)``."""
        if np.ndim(self.nu) == 0:
            return np.full((self.m, self.s), self.nu / np.sqrt(self.s))
        return np.broadcast_to(self.nu, (self.m, self.s)).copy()

    @property
    def nu_total(self) -> float:
        """sqrt of the task-average trace of the truth covariance."""
        if np.ndim(self.nu) == 0:
            return float(self.nu)
        return float(np.sqrt(np.sum(self.nu_matrix**2) / self.m))

    @property
    def alpha_r_value(self) -> float:
        if self.alpha_r is None:
            return self.n_r / (self.n_r + self.p + 1)
        return float(self.alpha_r)

    def with_(self, **changes) -> "MetaConfig":
        return replace(self, **changes)


def w0_uniform(norm_sq: float, s: int) -> np.ndarray:
    """Mean truth with equal coordinates and squared norm ``norm_sq``."""
    return np.full(s, np.sqrt(norm_sq / s))


@dataclass(frozen=True)
class RngStream:
    """Deterministic substream under ``master_seed``.

    ``key`` extends the seed sequence's spawn key, so streams with different
    keys are statistically independent and reproducible bit-for-bit.
    """

    master_seed: int
    key: tuple[int, ...] = ()

    def child(self, *key: int) -> "RngStream":
        return RngStream(self.master_seed, self.key + tuple(int(k) for k in key))

    def generator(self) -> np.random.Generator:
        # SeedSequence rejects negative spawn-key entries.
        spawn = tuple(k + 2**31 for k in self.key)
        seq = np.random.SeedSequence(entropy=self.master_seed, spawn_key=spawn)
        return np.random.Generator(np.random.PCG64(seq))

    def role(self, task: int, role: int) -> np.random.Generator:
        return self.child(task, role).generator()


@dataclass(frozen=True)
class TaskBatch:
    X: list[np.ndarray]
    eps: list[np.ndarray]
    y: list[np.ndarray]
    V: list[np.ndarray]
    eps_v: list[np.ndarray]
    y_v: list[np.ndarray]
    w: list[np.ndarray]

    @property
    def m(self) -> int:
        return len(self.X)


@dataclass(frozen=True)
class TestTask:
    __test__ = False

    w_r: np.ndarray
    X_r: np.ndarray
    eps_r: np.ndarray
    y_r: np.ndarray
    nu_r: float


def _pad(w_s: np.ndarray, p: int) -> np.ndarray:
    out = np.zeros(p)
    out[: w_s.size] = w_s
    return out


def sample_truths(cfg: MetaConfig, rng: RngStream) -> tuple[list[np.ndarray], np.ndarray]:
    """Draw the m training truths and the test truth, each padded to length p.

    Fluctuations around ``w0`` are Gaussian with independent coordinates.
    A unit-normal draw is scaled by the diversity afterwards, so configs that
    differ only in ``nu`` share the same underlying randomness.
    """
    nus = cfg.nu_matrix
    truths = []
    for i in range(cfg.m):
        z = rng.role(i, ROLE_TRUTH).standard_normal(cfg.s)
        truths.append(_pad(cfg.w0_s + nus[i] * z, cfg.p))
    z_r = rng.role(TEST_TASK, ROLE_TRUTH).standard_normal(cfg.s)
    w_r = _pad(cfg.w0_s + (cfg.nu_r / np.sqrt(cfg.s)) * z_r, cfg.p)
    return truths, w_r


def sample_task_batch(cfg: MetaConfig, truths: Sequence[np.ndarray], rng: RngStream) -> TaskBatch:
    if len(truths) != cfg.m:
        raise ConfigError(f"expected {cfg.m} truths, got {len(truths)}")
    X, eps, y, V, eps_v, y_v = [], [], [], [], [], []
    for i, w in enumerate(truths):
        Xi = rng.role(i, ROLE_X).standard_normal((cfg.p, cfg.n_t))
        Vi = rng.role(i, ROLE_V).standard_normal((cfg.p, cfg.n_v))
        ei = cfg.sigma * rng.role(i, ROLE_EPS).standard_normal(cfg.n_t)
        evi = cfg.sigma * rng.role(i, ROLE_EPS_V).standard_normal(cfg.n_v)
        X.append(Xi)
        V.append(Vi)
        eps.append(ei)
        eps_v.append(evi)
        y.append(Xi.T @ w + ei)
        y_v.append(Vi.T @ w + evi)
    return TaskBatch(X, eps, y, V, eps_v, y_v, [np.asarray(w) for w in truths])


def sample_test_task(cfg: MetaConfig, w_r: np.ndarray, rng: RngStream) -> TestTask:
    X_r = rng.role(TEST_TASK, ROLE_X_R).standard_normal((cfg.p, cfg.n_r))
    eps_r = cfg.sigma_r * rng.role(TEST_TASK, ROLE_EPS_R).standard_normal(cfg.n_r)
    return TestTask(w_r=w_r, X_r=X_r, eps_r=eps_r, y_r=X_r.T @ w_r + eps_r, nu_r=cfg.nu_r)
