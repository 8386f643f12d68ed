"""Newton projection of a proposed state onto the constraint manifold.

The search direction is frozen along the range of the Jacobian at the
*previous* accepted state: the iterate is Y(L) = Y_half + J_prev^T L, and each
Newton step solves

    (J(Y(L)) @ J_prev^T) delta = Gamma(Y(L)),    L <- L - delta.

The left factor is re-evaluated at the moving point while the right factor
stays frozen; this asymmetric scheme is used verbatim (no symmetrized or
quasi-Newton variant).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import get_lapack_funcs, lu_factor, lu_solve

from .model import ConstraintSystem

__all__ = ["ProjectionResult", "SingularGramError", "NonFiniteError", "project"]

_RCOND_FLOOR = 1e-14


class SingularGramError(RuntimeError):
    """The Newton system is numerically singular.

    Signals rank-deficient constraint geometry, e.g. all particles sitting on
    fewer support points than there are constraints.
    """


class NonFiniteError(RuntimeError):
    """A constraint or Jacobian evaluation produced non-finite values."""


@dataclass
class ProjectionResult:
    """Outcome of one projection call.

    On success ``state`` satisfies ``max|Gamma| <= tol`` and ``jacobian``
    holds the constraint Jacobian evaluated there (reusable by the caller);
    on failure the caller's state is untouched, ``state`` is None, and
    ``failure_reason`` is one of ``"iteration_budget"``, ``"singular_gram"``
    or ``"non_finite"`` (the latter two arise when a diverging Newton iterate
    degrades the solve; the caller's retry policy applies).
    """

    success: bool
    state: np.ndarray | None
    multiplier: np.ndarray
    newton_iterations: int
    residual_inf: float
    jacobian: np.ndarray | None = None
    failure_reason: str | None = None


def _solve_checked(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Dense LU solve with a reciprocal-condition guard."""
    if not np.all(np.isfinite(matrix)):
        raise NonFiniteError("Newton matrix contains non-finite entries")
    try:
        lu, piv = lu_factor(matrix, check_finite=False)
    except ValueError as exc:
        raise SingularGramError(str(exc)) from exc
    gecon = get_lapack_funcs(("gecon",), (matrix,))[0]
    anorm = np.abs(matrix).sum(axis=0).max() if matrix.size else 0.0
    rcond, info = gecon(lu, anorm, norm="1")
    if info != 0 or not np.isfinite(rcond) or rcond < _RCOND_FLOOR:
        raise SingularGramError(
            f"Newton matrix reciprocal condition {rcond:.3e} below {_RCOND_FLOOR:.0e}"
        )
    return lu_solve((lu, piv), rhs, check_finite=False)


def _checked_eval(csys: ConstraintSystem, state: np.ndarray):
    gamma, jac = csys.constraints_and_jacobian_flat(state)
    if not (np.all(np.isfinite(gamma)) and np.all(np.isfinite(jac))):
        raise NonFiniteError("constraint evaluation produced non-finite values")
    return gamma, jac


def project(
    csys: ConstraintSystem,
    state_half: np.ndarray,
    jacobian_at_prev: np.ndarray,
    lam_init: np.ndarray | None = None,
    i_max: int = 50,
    tol: float = 1e-12,
) -> ProjectionResult:
    """Project ``state_half`` onto {Gamma = 0} along rows of ``jacobian_at_prev``.

    Parameters
    ----------
    csys : constraint system evaluating Gamma and its Jacobian.
    state_half : flat coordinates of the proposal.
    jacobian_at_prev : (n_rows, n_coords) Jacobian at the previous state.
    lam_init : warm-start multiplier (zeros when omitted).
    i_max : Newton iteration budget.
    tol : max-norm stopping tolerance on Gamma.

    Returns a :class:`ProjectionResult`; failure leaves the caller's state
    untouched (retry policy, e.g. halving the step and tolerance, belongs to
    the caller).
    """
    state_half = np.asarray(state_half, dtype=float)
    n_rows = jacobian_at_prev.shape[0]
    lam = np.zeros(n_rows) if lam_init is None else np.asarray(lam_init, dtype=float).copy()
    if lam.shape != (n_rows,):
        raise ValueError("multiplier size does not match the constraint row count")
    jac_prev_t = jacobian_at_prev.T

    if n_rows == 0:
        return ProjectionResult(
            True, state_half.copy(), lam, 0, 0.0, np.zeros((0, len(state_half)))
        )

    state = state_half + jac_prev_t @ lam
    gamma, jac = _checked_eval(csys, state)
    residual = float(np.abs(gamma).max())
    iterations = 0
    while residual > tol:
        if iterations >= i_max:
            return ProjectionResult(
                False, None, lam, iterations, residual, failure_reason="iteration_budget"
            )
        try:
            lam -= _solve_checked(jac @ jac_prev_t, gamma)
        except SingularGramError:
            if iterations == 0:
                # The very first solve probes the geometry at the warm-start
                # point: a singular matrix there is a structural defect, not
                # Newton divergence.
                raise
            return ProjectionResult(
                False, None, lam, iterations, residual, failure_reason="singular_gram"
            )
        state = state_half + jac_prev_t @ lam
        try:
            gamma, jac = _checked_eval(csys, state)
        except NonFiniteError:
            return ProjectionResult(
                False, None, lam, iterations, residual, failure_reason="non_finite"
            )
        residual = float(np.abs(gamma).max())
        iterations += 1
    return ProjectionResult(True, state, lam, iterations, residual, jac)
