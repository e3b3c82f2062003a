"""Minimizers of the meta loss and the Term 1 / Term 2 model-error split."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .maml_core import MetaSystem

OVERPARAMETERIZED = "overparameterized"
UNDERPARAMETERIZED = "underparameterized"

#: Gram condition number above which the Cholesky path hands over to SVD.
COND_MAX = 1e12


class DegenerateSystemError(ArithmeticError):
    """The stacked system is rank deficient to working precision."""

    def __init__(self, message: str, eig_min: float):
        super().__init__(f"{message} (smallest eigenvalue {eig_min:.6g})")
        self.eig_min = eig_min


@dataclass(frozen=True)
class SolveReport:
    w_hat: np.ndarray
    model_error: float
    interpolation_residual: float
    regime: str
    method: str
    term1: float | None = None
    term2: float | None = None


def _regime(sys: MetaSystem) -> str:
    return OVERPARAMETERIZED if sys.p > sys.rows else UNDERPARAMETERIZED


def min_norm_apply(sys: MetaSystem, rhs: np.ndarray, cond_max: float = COND_MAX) -> tuple[np.ndarray, str]:
    """Return ``B^T (B B^T)^{-1} rhs`` for one or more right-hand sides.

    Cholesky of the Gram matrix when it is well conditioned, otherwise the
    thin SVD of ``B`` applied as ``V S^{-1} U^T``, which avoids squaring the
    condition number. Raises :class:`DegenerateSystemError` if ``B`` has
    fewer than ``rows`` numerically nonzero singular values.
    """
    if sys.p < sys.rows:
        raise DegenerateSystemError(
            f"B B^T is singular: p={sys.p} < m*n_v={sys.rows}", float(sys.gram_eigvals[0])
        )
    eig = sys.gram_eigvals
    if eig[0] > 0 and eig[-1] / eig[0] <= cond_max:
        factor = scipy.linalg.cho_factor(sys.gram, lower=True, check_finite=False)
        return sys.B.T @ scipy.linalg.cho_solve(factor, rhs, check_finite=False), "cholesky"
    U, sv, Vt = np.linalg.svd(sys.B, full_matrices=False)
    tol = sv[0] * max(sys.B.shape) * np.finfo(float).eps
    if sv[-1] <= tol:
        raise DegenerateSystemError("B is not full row rank", float(eig[0]))
    proj = U.T @ rhs
    proj = proj / (sv[:, None] if proj.ndim == 2 else sv)
    return Vt.T @ proj, "svd"


def _decompose(sys: MetaSystem, cond_max: float):
    rhs = np.column_stack([sys.gamma, sys.delta_gamma, sys.B @ sys.w0])
    x, method = min_norm_apply(sys, rhs, cond_max)
    return x[:, 0], x[:, 1], sys.w0 - x[:, 2], method


def decompose_model_error(sys: MetaSystem, w0: np.ndarray | None = None, cond_max: float = COND_MAX) -> tuple[float, float]:
    """Return ``(term1, term2)``: the null-space part of ``w0`` and the ideal-step norm."""
    if w0 is not None and not np.array_equal(w0, sys.w0):
        sys = MetaSystem(sys.B, sys.gamma, sys.gamma - sys.B @ w0, np.asarray(w0, float), sys.n_v)
    _, ideal_step, residual_w0, _ = _decompose(sys, cond_max)
    return float(residual_w0 @ residual_w0), float(ideal_step @ ideal_step)


def solve_min_l2(sys: MetaSystem, cond_max: float = COND_MAX) -> SolveReport:
    """Minimum-norm interpolator ``B^T (B B^T)^{-1} gamma``.

    Also accepts the square case ``p == m*n_v``, where the interpolator is
    unique.
    """
    w_hat, ideal_step, residual_w0, method = _decompose(sys, cond_max)
    err = w_hat - sys.w0
    r = sys.B @ w_hat - sys.gamma
    return SolveReport(
        w_hat=w_hat,
        model_error=float(err @ err),
        interpolation_residual=float(np.linalg.norm(r)),
        regime=_regime(sys),
        method=method,
        term1=float(residual_w0 @ residual_w0),
        term2=float(ideal_step @ ideal_step),
    )


def solve_ideal(sys: MetaSystem, w0: np.ndarray | None = None, cond_max: float = COND_MAX) -> SolveReport:
    """Interpolator closest to ``w0``: ``w0 + B^T (B B^T)^{-1} delta_gamma``."""
    if w0 is None:
        w0, delta = sys.w0, sys.delta_gamma
    else:
        w0 = np.asarray(w0, dtype=float)
        delta = sys.gamma - sys.B @ w0
    step, method = min_norm_apply(sys, delta, cond_max)
    w_hat = w0 + step
    r = sys.B @ w_hat - sys.gamma
    return SolveReport(
        w_hat=w_hat,
        model_error=float(step @ step),
        interpolation_residual=float(np.linalg.norm(r)),
        regime=_regime(sys),
        method=method,
    )


def solve_underparameterized(sys: MetaSystem, cond_max: float = COND_MAX) -> SolveReport:
    """Least-squares minimizer ``(B^T B)^{-1} B^T gamma`` of the meta loss."""
    BtB = sys.B.T @ sys.B
    BtB = 0.5 * (BtB + BtB.T)
    eig = np.linalg.eigvalsh(BtB)
    if sys.p > sys.rows or eig[0] <= eig[-1] * max(sys.B.shape) * np.finfo(float).eps:
        raise DegenerateSystemError("B^T B is singular", float(eig[0]))
    if eig[-1] / eig[0] <= cond_max:
        factor = scipy.linalg.cho_factor(BtB, lower=True, check_finite=False)
        step = scipy.linalg.cho_solve(factor, sys.B.T @ sys.delta_gamma, check_finite=False)
        method = "cholesky"
    else:
        step = scipy.linalg.lstsq(sys.B, sys.delta_gamma, check_finite=False)[0]
        method = "lstsq"
    # Solving for the offset from w0 is exact when delta_gamma vanishes.
    w_hat = sys.w0 + step
    return SolveReport(
        w_hat=w_hat,
        model_error=float(step @ step),
        interpolation_residual=float(np.linalg.norm(sys.B @ w_hat - sys.gamma)),
        regime=UNDERPARAMETERIZED,
        method=method,
    )


def solve(sys: MetaSystem, cond_max: float = COND_MAX) -> SolveReport:
    """Route to the min-norm interpolator when ``p >= m*n_v``, else least squares."""
    if sys.p >= sys.rows:
        return solve_min_l2(sys, cond_max)
    return solve_underparameterized(sys, cond_max)


def null_space_basis(B: np.ndarray) -> np.ndarray:
    """Orthonormal basis of ``null(B)`` as columns."""
    return scipy.linalg.null_space(B)
