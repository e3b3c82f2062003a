"""Closed-form expectations and high-probability bounds for the model error.

All functions are pure in their arguments. Logarithms are natural.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .task_gen import MetaConfig

#: Calibration of the dominating-term approximation for the descent-curve sweeps.
DEFAULT_CONSTANTS = {"C1": 0.001, "C2": 0.99995, "C3": 0.001, "C4": 0.99995}

PAPER_SIZE_THRESHOLD = 256

FLAG_BELOW_THRESHOLD = "below_threshold"
FLAG_VACUOUS_ETA = "vacuous_eta"
FLAG_NONPOSITIVE_EIG = "nonpositive_eig_bound"
FLAG_UNDERPARAMETERIZED = "underparameterized"
FLAG_INVALID_B_W0 = "invalid_b_w0"


# --------------------------------------------------------------------------
# Test-task adaptation


@dataclass(frozen=True)
class TestErrorParams:
    __test__ = False

    zeta: float
    p: int
    n_r: int
    alpha_r: float
    nu_r: float
    sigma_r: float

    @classmethod
    def from_config(cls, zeta: float, cfg: MetaConfig, alpha_r: float | None = None) -> "TestErrorParams":
        a = cfg.alpha_r_value if alpha_r is None else alpha_r
        return cls(zeta=zeta, p=cfg.p, n_r=cfg.n_r, alpha_r=a, nu_r=cfg.nu_r, sigma_r=cfg.sigma_r)


def f_test(params: TestErrorParams) -> float:
    """Expected squared test error after one adaptation step on the test task."""
    p, n_r, a = params.p, params.n_r, params.alpha_r
    return ((1 - a) ** 2 + (p + 1) / n_r * a**2) * (params.zeta + params.nu_r**2) + a**2 * p / n_r * params.sigma_r**2


def optimal_alpha_r(zeta: float, cfg: MetaConfig) -> tuple[float, bool]:
    """Minimizer of ``f_test`` over the test step size.

    Returns ``(alpha, degenerate)``; ``degenerate`` is True when the objective
    is flat (no diversity, no model error, no noise) and 0 is returned.
    """
    K = zeta + cfg.nu_r**2
    denom = (1 + (cfg.p + 1) / cfg.n_r) * K + cfg.p * cfg.sigma_r**2 / cfg.n_r
    if denom == 0:
        return 0.0, True
    if cfg.sigma_r == 0:
        # K cancels; the practical rule is then exactly optimal.
        return cfg.n_r / (cfg.n_r + cfg.p + 1), False
    return K / denom, False


# --------------------------------------------------------------------------
# Exact expectations


def expected_delta_gamma_sq(cfg: MetaConfig) -> float:
    a, mn_v = cfg.alpha_t, cfg.mn_v
    nu2 = cfg.nu_total**2
    return mn_v * cfg.sigma**2 * (1 + a**2 * cfg.p / cfg.n_t) + nu2 * mn_v * ((1 - a) ** 2 + a**2 * (cfg.p + 1) / cfg.n_t)


def expected_term1(cfg: MetaConfig, w0_norm_sq: float | None = None) -> float:
    if cfg.p < cfg.mn_v:
        raise ValueError("the projection term is defined for p >= m*n_v")
    norm_sq = cfg.w0_norm_sq if w0_norm_sq is None else w0_norm_sq
    return (cfg.p - cfg.mn_v) / cfg.p * norm_sq


def xxxx_identity(n: int, p: int) -> np.ndarray:
    """``E[X X^T X X^T]`` for a ``p x n`` standard Gaussian ``X``."""
    return n * (n + p + 1) * np.eye(p)


def xxxx_monte_carlo(n: int, p: int, draws: int, rng: np.random.Generator, chunk: int = 20000) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and elementwise standard error of ``X X^T X X^T``."""
    total = np.zeros((p, p))
    total_sq = np.zeros((p, p))
    done = 0
    while done < draws:
        k = min(chunk, draws - done)
        X = rng.standard_normal((k, p, n))
        W = X @ X.transpose(0, 2, 1)
        W2 = W @ W
        total += W2.sum(axis=0)
        total_sq += (W2**2).sum(axis=0)
        done += k
    mean = total / draws
    var = (total_sq / draws - mean**2) * draws / max(draws - 1, 1)
    return mean, np.sqrt(np.maximum(var, 0) / draws)


# --------------------------------------------------------------------------
# High-probability bound stack


@dataclass(frozen=True)
class BoundReport:
    alpha_t_prime: float
    b_eig_min: float
    b_eig_max: float
    c_eig_min: float
    c_eig_max: float
    D: float
    b_delta: float
    b_w0: float
    b_w0_lower: float
    b_w_ideal: float
    b_w: float
    eta: float
    regime_flag: str
    flags: tuple[str, ...] = field(default=())

    @property
    def branch_eig_min(self) -> float:
        return self.b_eig_min if self.regime_flag == "p>n_t" else self.c_eig_min

    @property
    def branch_eig_max(self) -> float:
        return self.b_eig_max if self.regime_flag == "p>n_t" else self.c_eig_max

    def as_dict(self) -> dict:
        d = asdict(self)
        d["flags"] = ";".join(self.flags)
        return d


#: Display names for the report fields.
BOUND_SYMBOLS = {
    "alpha_t_prime": "α_t′",
    "b_eig_min": "b_eig,min",
    "b_eig_max": "b_eig,max",
    "c_eig_min": "c_eig,min",
    "c_eig_max": "c_eig,max",
    "D": "D",
    "b_delta": "b_δ",
    "b_w0": "b_w0",
    "b_w0_lower": "b̃_w0",
    "b_w_ideal": "b_w^ideal",
    "b_w": "b_w",
    "eta": "η",
    "regime_flag": "eigenvalue branch",
}


def alpha_t_prime(cfg: MetaConfig) -> float:
    return cfg.alpha_t / cfg.n_t * (math.sqrt(cfg.p) + math.sqrt(cfg.n_t) + math.log(math.sqrt(cfg.n_t))) ** 2


def eig_bounds_p_gt_nt(cfg: MetaConfig, a_prime: float) -> tuple[float, float]:
    p, n_t, n_v, mn_v = cfg.p, cfg.n_t, cfg.n_v, cfg.mn_v
    hi = max(a_prime, 1 - a_prime) ** 2
    spread = ((n_v + 1) * hi + 6 * mn_v) * math.sqrt(p) * math.log(p)
    lo = p + (max(0.0, 1 - a_prime) ** 2 - 1) * n_t - spread
    up = p + (hi - 1) * n_t + spread
    return lo, up


def eig_bounds_p_le_nt(cfg: MetaConfig, a_prime: float) -> tuple[float, float]:
    p, mn_v = cfg.p, cfg.mn_v
    hi = max(a_prime, 1 - a_prime) ** 2
    root = math.sqrt(p * math.log(p))
    lo = max(0.0, 1 - a_prime) ** 2 * p - 2 * mn_v * hi * root
    up = hi * (p + (2 * mn_v + 1) * root)
    return lo, up


def delta_gamma_bound(cfg: MetaConfig) -> tuple[float, float]:
    """``(D, b_delta)``: high-probability bound on ``||delta gamma||^2``."""
    p, s, n_t, a, mn_v = cfg.p, cfg.s, cfg.n_t, cfg.alpha_t, cfg.mn_v
    L = math.log(s * n_t)
    root = math.sqrt(n_t * L)
    D = max(abs(1 - a * (n_t + 2 * root + 2 * L) / n_t), abs(1 - a * (n_t - 2 * root) / n_t)) ** 2
    noise = mn_v * cfg.sigma**2 * (1 + a**2 * p * math.log(n_t) ** 2 * math.log(p) / n_t)
    diversity = mn_v * cfg.nu_total**2 * 2 * L * (D + a**2 * (p - 1) / n_t * 6.25 * math.log(s * p * n_t) ** 2)
    return D, noise + diversity


def projection_bounds(cfg: MetaConfig) -> tuple[float, float]:
    """``(b_w0, b_w0_lower)`` bracketing Term 1; NaN when ``p < m*n_v``."""
    p, k = cfg.p, cfg.p - cfg.mn_v
    if k < 0:
        return math.nan, math.nan
    lp = math.log(p)
    den_up = p - 2 * math.sqrt(p * lp)
    upper = (k + 2 * math.sqrt(k * lp) + 2 * lp) / den_up * cfg.w0_norm_sq if den_up > 0 else math.inf
    lower = (k - 2 * math.sqrt(k * lp)) / (p + 2 * math.sqrt(p * lp) + 2 * lp) * cfg.w0_norm_sq
    return upper, lower


def bound_stack(cfg: MetaConfig) -> BoundReport:
    """Every quantity of the model-error bound, with applicability flags."""
    flags = []
    ap = alpha_t_prime(cfg)
    b_lo, b_hi = eig_bounds_p_gt_nt(cfg, ap)
    c_lo, c_hi = eig_bounds_p_le_nt(cfg, ap)
    D, b_delta = delta_gamma_bound(cfg)
    b_w0, b_w0_lower = projection_bounds(cfg)
    branch = "p>n_t" if cfg.p > cfg.n_t else "p<=n_t"
    eig_min = b_lo if cfg.p > cfg.n_t else c_lo
    denom = max(eig_min, 0.0)
    if denom > 0:
        b_ideal = b_delta / denom
    else:
        b_ideal = math.inf
        flags.append(FLAG_NONPOSITIVE_EIG)
    if cfg.p < cfg.mn_v:
        flags.append(FLAG_UNDERPARAMETERIZED)
    elif not math.isfinite(b_w0) or b_w0 < 0:
        flags.append(FLAG_INVALID_B_W0)
    eta = 27 * cfg.m**2 * cfg.n_v**2 / min(cfg.p, cfg.n_t) ** 0.4
    if min(cfg.p, cfg.n_t) < PAPER_SIZE_THRESHOLD:
        flags.append(FLAG_BELOW_THRESHOLD)
    if eta >= 1:
        flags.append(FLAG_VACUOUS_ETA)
    return BoundReport(
        alpha_t_prime=ap,
        b_eig_min=b_lo,
        b_eig_max=b_hi,
        c_eig_min=c_lo,
        c_eig_max=c_hi,
        D=D,
        b_delta=b_delta,
        b_w0=b_w0,
        b_w0_lower=b_w0_lower,
        b_w_ideal=b_ideal,
        b_w=b_w0 + b_ideal,
        eta=eta,
        regime_flag=branch,
        flags=tuple(flags),
    )


# --------------------------------------------------------------------------
# Dominating-term approximation and the descent floor


@dataclass(frozen=True)
class ApproxBound:
    b_w0: float
    b_w_ideal: float
    b_delta: float

    @property
    def b_w(self) -> float:
        return self.b_w0 + self.b_w_ideal


def approx_b_delta(cfg: MetaConfig, C1: float, C2: float, C3: float) -> float:
    return cfg.mn_v * ((1 + C1 / cfg.n_t) * cfg.sigma**2 + C2 * (1 + C3 / cfg.n_t) * cfg.nu_total**2)


def approx_bound(cfg: MetaConfig, C1: float = 0.001, C2: float = 0.99995, C3: float = 0.001, C4: float = 0.99995) -> ApproxBound:
    """Leading-order model-error bound; the ideal part is +inf for ``p <= C4*m*n_v``."""
    b_delta = approx_b_delta(cfg, C1, C2, C3)
    gap = cfg.p - C4 * cfg.mn_v
    if gap > 0:
        ideal = b_delta / gap
    else:
        ideal = math.inf
    return ApproxBound(b_w0=(cfg.p - cfg.mn_v) / cfg.p * cfg.w0_norm_sq, b_w_ideal=ideal, b_delta=b_delta)


def approx_curve(p: np.ndarray, mn_v: int, w0_norm_sq: float, b_delta: float, C4: float) -> np.ndarray:
    """The approximate bound as a function of a (real) feature count ``p > C4*m*n_v``."""
    p = np.asarray(p, dtype=float)
    return (p - mn_v) / p * w0_norm_sq + b_delta / (p - C4 * mn_v)


@dataclass(frozen=True)
class DescentFloor:
    g: float
    monotone_decreasing: bool
    p_star: float | None = None
    floor_value: float | None = None


def descent_floor(cfg: MetaConfig | None = None, C4: float = 0.99995, b_delta: float | None = None, *, mn_v: int | None = None, w0_norm_sq: float | None = None) -> DescentFloor:
    """Location and height of the minimum of the approximate bound over ``p``.

    With ``g = b_delta / (m n_v ||w0||^2) >= 1`` the bound decreases for every
    ``p > C4 m n_v``; otherwise it bottoms out at ``C4 m n_v / (1 - sqrt g)``.
    """
    if cfg is not None:
        mn_v = cfg.mn_v if mn_v is None else mn_v
        w0_norm_sq = cfg.w0_norm_sq if w0_norm_sq is None else w0_norm_sq
        if b_delta is None:
            c = DEFAULT_CONSTANTS
            b_delta = approx_b_delta(cfg, c["C1"], c["C2"], c["C3"])
    if mn_v is None or w0_norm_sq is None or b_delta is None:
        raise ValueError("need cfg or explicit mn_v, w0_norm_sq and b_delta")
    if not w0_norm_sq > 0:
        raise ValueError("the descent floor needs a nonzero mean truth")
    g = b_delta / (mn_v * w0_norm_sq)
    if g >= 1:
        return DescentFloor(g=g, monotone_decreasing=True)
    root = math.sqrt(g)
    return DescentFloor(
        g=g,
        monotone_decreasing=False,
        p_star=C4 * mn_v / (1 - root),
        floor_value=w0_norm_sq * (1 - (1 - root) ** 2 / C4),
    )


# --------------------------------------------------------------------------
# Underparameterized p = s = 1


def underparam_p1(cfg: MetaConfig, a1: float, a2: float, a3: float, a4: float) -> float:
    a = cfg.alpha_t / cfg.n_t
    lead = 1 - a * a1
    if lead <= 0:
        raise ValueError("need 1 - (alpha_t/n_t) * a1 > 0")
    tail = 1 - a * a2
    nu2, s2, m = cfg.nu_total**2, cfg.sigma**2, cfg.m
    return nu2 * a3 / m * (tail / lead) ** 4 + s2 * a3 / m * (a * a1) ** 2 * tail**2 / lead**4 + s2 / (lead**2 * a4)


def p1_plugins(cfg: MetaConfig) -> dict[str, float]:
    """Chi-square concentration endpoints used by the p = s = 1 bracket."""
    n_t, n_v, mn_v = cfg.n_t, cfg.n_v, cfg.mn_v
    lt, lv, lmv = math.log(n_t), math.log(n_v), math.log(mn_v)
    return {
        "g_upper": n_t + 2 * math.sqrt(n_t * lt) + 2 * lt,
        "g_lower": n_t - 2 * math.sqrt(n_t * lt),
        "h_upper": mn_v + 2 * math.sqrt(mn_v * lmv) + 2 * lmv,
        "r_upper": n_v + 2 * math.sqrt(n_v * lv) + 2 * lv,
        "r_lower": n_v - 2 * math.sqrt(n_v * lv),
    }


def underparam_p1_bracket(cfg: MetaConfig) -> tuple[float, float]:
    """Lower and upper high-probability values for the p = s = 1 model error.

    The upper value is +inf when ``r_lower <= 0`` (small ``n_v``).
    """
    k = p1_plugins(cfg)
    lower = underparam_p1(cfg, k["g_lower"], k["g_upper"], 1.0, k["h_upper"])
    if k["r_lower"] <= 0:
        return lower, math.inf
    upper = underparam_p1(cfg, k["g_upper"], k["g_lower"], (k["r_upper"] / k["r_lower"]) ** 2, cfg.m * k["r_lower"])
    return lower, upper


def underparam_p1_approx(cfg: MetaConfig) -> float:
    a, m = cfg.alpha_t, cfg.m
    return cfg.nu_total**2 / m + cfg.sigma**2 * a**2 / m + cfg.sigma**2 / ((1 - a) ** 2 * cfg.mn_v)
