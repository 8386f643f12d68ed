"""Feasible starting states: constraint flow, sparse subsampling, support expansion.

The standard pipeline samples particle coordinates i.i.d. from the marginal
law and integrates the normalized residual-descent flow

    dY/dt = -|Gamma(Y)|^2 * (J^T Gamma) / |J^T Gamma|^2

with a third-order Runge-Kutta (Bogacki-Shampine) scheme until the constraint
residual reaches tolerance. Along exact trajectories |Gamma|^2 decays like
exp(-2t), so the flow is slow but far more robust than a Newton solve from a
random start.

An optional pre-step compresses a large i.i.d. cloud into at most N+1 support
points by non-negative least squares on the moment matrix (Lawson-Hanson
active set), after which the support is replicated back to the requested
particle count and jittered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .measures import MarginalLaw
from .model import ConstraintSystem, ParticleSystem, SystemShape, WeightFunction

__all__ = [
    "ZeroFlowFieldError",
    "NnlsError",
    "FlowReport",
    "constraint_flow",
    "nnls",
    "nnls_subsample",
    "expand_support",
    "sample_particles",
    "make_feasible_system",
]

_UNDERFLOW = 1e-300


class ZeroFlowFieldError(RuntimeError):
    """The flow field vanished at an infeasible point (stationary residual)."""


class NnlsError(RuntimeError):
    """The active-set iteration exceeded its pivot budget."""


@dataclass
class FlowReport:
    converged: bool
    iterations: int
    final_residual_inf: float
    support_size: int | None = None


def _bs3_step(f, y: np.ndarray, h: float) -> np.ndarray:
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.75 * h * k2)
    return y + (h / 9.0) * (2.0 * k1 + 3.0 * k2 + 4.0 * k3)


def constraint_flow(
    sys: ParticleSystem,
    csys: ConstraintSystem,
    tol: float = 1e-12,
    max_iters: int = 20000,
    h0: float = 0.1,
) -> tuple[ParticleSystem, FlowReport]:
    """Drive a system onto the constraint manifold; returns (system, report).

    Steps that increase |Gamma|_2 are rejected and retried at half the step
    size; ten consecutive accepts double it. On a non-converged budget the
    best state so far is returned with ``converged=False``.
    """
    y = sys.flatten()
    shape = sys.shape

    def residual2(state: np.ndarray) -> float:
        g = csys.constraints_flat(state)
        return float(g @ g)

    def field(state: np.ndarray) -> np.ndarray:
        gamma, jac = csys.constraints_and_jacobian_flat(state)
        pull = jac.T @ gamma
        denom = float(pull @ pull)
        if denom < _UNDERFLOW:
            if float(np.abs(gamma).max()) > tol:
                raise ZeroFlowFieldError(
                    "gradient of the residual vanished away from the manifold"
                )
            return np.zeros_like(state)
        return -(float(gamma @ gamma) / denom) * pull

    gamma = csys.constraints_flat(y)
    res_inf = float(np.abs(gamma).max()) if gamma.size else 0.0
    if res_inf <= tol:
        return ParticleSystem.from_flat(y, shape), FlowReport(True, 0, res_inf)

    res2 = float(gamma @ gamma)
    h = h0
    streak = 0
    for iteration in range(1, max_iters + 1):
        y_new = _bs3_step(field, y, h)
        res2_new = residual2(y_new)
        if res2_new <= res2:
            y, res2 = y_new, res2_new
            streak += 1
            if streak >= 10:
                h *= 2.0
                streak = 0
        else:
            h *= 0.5
            streak = 0
            if h < _UNDERFLOW:
                raise ZeroFlowFieldError("flow step size underflow before reaching tolerance")
        gamma = csys.constraints_flat(y)
        res_inf = float(np.abs(gamma).max())
        if res_inf <= tol:
            return ParticleSystem.from_flat(y, shape), FlowReport(True, iteration, res_inf)
    return ParticleSystem.from_flat(y, shape), FlowReport(False, max_iters, res_inf)


# ---------------------------------------------------------------------------
# Non-negative least squares (Lawson-Hanson active set)
# ---------------------------------------------------------------------------


def nnls(
    matrix: np.ndarray, rhs: np.ndarray, max_pivots: int | None = None
) -> tuple[np.ndarray, float]:
    """Solve min_{w >= 0} |matrix @ w - rhs|_2 by the Lawson-Hanson active set.

    Returns (w, residual norm). The solution support never exceeds the row
    count. Raises :class:`NnlsError` after ``max_pivots`` pivots
    (default 10 * number of columns).
    """
    a = np.asarray(matrix, dtype=float)
    b = np.asarray(rhs, dtype=float)
    n_rows, n_cols = a.shape
    if max_pivots is None:
        max_pivots = 10 * n_cols
    x = np.zeros(n_cols)
    passive = np.zeros(n_cols, dtype=bool)
    resid = b - a @ x
    # Dual feasibility tolerance scaled to the problem.
    tol = 10 * np.finfo(float).eps * np.abs(a).sum(axis=1).max() * max(n_rows, n_cols)
    pivots = 0
    while True:
        w = a.T @ resid
        w[passive] = -np.inf
        j = int(np.argmax(w))
        if w[j] <= tol or passive.all():
            break
        passive[j] = True
        while True:
            pivots += 1
            if pivots > max_pivots:
                raise NnlsError(f"active-set iteration exceeded {max_pivots} pivots")
            z = np.zeros(n_cols)
            sol, *_ = np.linalg.lstsq(a[:, passive], b, rcond=None)
            z[passive] = sol
            if z[passive].min() > 0.0:
                x = z
                break
            mask = passive & (z <= 0.0)
            alpha = np.min(x[mask] / (x[mask] - z[mask]))
            x = x + alpha * (z - x)
            passive &= x > 0.0
            x[~passive] = 0.0
        resid = b - a @ x
    return x, float(np.linalg.norm(resid))


def nnls_subsample(
    samples: np.ndarray, csys: ConstraintSystem
) -> tuple[np.ndarray, np.ndarray, float]:
    """Compress a sample cloud to <= N+1 weighted support points.

    ``samples`` has shape (K_inf, M, d). Solves
    min_{w >= 0} |Phi w - mu_bar|^2 where row n of Phi holds the per-sample
    phi_n-averages and the final row is all ones, with
    mu_bar = (mu_1..mu_N, 1). Returns (support points, weights, residual).
    """
    samples = np.asarray(samples, dtype=float)
    k_inf, m, d = samples.shape
    basis = csys.basis
    values = basis.values(samples.reshape(-1, d))
    averages = values.reshape(k_inf, m, basis.size).mean(axis=1)
    phi = np.vstack([averages.T, np.ones(k_inf)])
    mu_bar = np.concatenate([basis.target_moments, [1.0]])
    weights, residual = nnls(phi, mu_bar, max_pivots=10 * k_inf)
    support = weights > 0.0
    return samples[support], weights[support], residual


def expand_support(
    support: np.ndarray,
    weights: np.ndarray,
    count: int,
    jitter: float,
    seed: int,
    weight_function: WeightFunction | None = None,
) -> ParticleSystem:
    """Replicate weighted support points into ``count`` particles.

    Copy counts follow largest-remainder rounding of count * weight (ties to
    the lowest index), each copy takes an equal split of its parent's weight,
    and positions receive Gaussian jitter of scale ``jitter``. In adaptive
    mode the weight parameters are set to the preimage of (split weight *
    count) so the particle weights reproduce the splits exactly.
    """
    support = np.asarray(support, dtype=float)
    weights = np.asarray(weights, dtype=float)
    n_support = len(support)
    if n_support > count:
        raise ValueError(f"support size {n_support} exceeds target count {count}")
    total = weights.sum()
    shares = count * weights / total
    copies = np.floor(shares).astype(int)
    remainder = count - copies.sum()
    if remainder > 0:
        fractional = shares - np.floor(shares)
        order = np.lexsort((np.arange(n_support), -fractional))
        copies[order[:remainder]] += 1

    rng = np.random.default_rng(seed)
    positions = np.repeat(support, copies, axis=0)
    split = np.repeat(np.where(copies > 0, weights / np.maximum(copies, 1), 0.0), copies)
    split = split / split.sum()
    if jitter > 0:
        positions = positions + jitter * rng.standard_normal(positions.shape)
    if weight_function is None:
        return ParticleSystem(positions)
    params = weight_function.preimage(split * count)
    return ParticleSystem(positions, weight_params=params, weight_function=weight_function)


# ---------------------------------------------------------------------------
# End-to-end pipeline
# ---------------------------------------------------------------------------


def sample_particles(
    law: MarginalLaw,
    count: int,
    marginals: int,
    seed: int,
    weight_function: WeightFunction | None = None,
) -> ParticleSystem:
    """Particles with all K*M coordinates drawn i.i.d. from the law (weights 1/K)."""
    points = law.sample(count * marginals, seed)
    positions = points.reshape(count, marginals, law.dimension)
    if weight_function is None:
        return ParticleSystem(positions)
    params = np.full(count, float(weight_function.preimage(np.asarray(1.0))))
    return ParticleSystem(positions, weight_params=params, weight_function=weight_function)


def make_feasible_system(
    law: MarginalLaw,
    csys: ConstraintSystem,
    seed: int,
    method: str = "rk3",
    k_inf: int | None = None,
    jitter: float | None = None,
    tol: float = 1e-12,
    max_iters: int = 20000,
    h0: float = 0.1,
) -> tuple[ParticleSystem, FlowReport]:
    """Sample, optionally compress through NNLS, then flow onto the manifold.

    ``method`` is ``"rk3"`` (sample then flow) or ``"nnls_then_rk3"``
    (sample ``k_inf`` candidates, compress to a sparse support, replicate and
    jitter, then flow).
    """
    shape = csys.shape
    if method == "rk3":
        start = sample_particles(law, shape.K, shape.M, seed, shape.weight_function)
        support_size = None
    elif method == "nnls_then_rk3":
        k_inf = 100 * shape.K if k_inf is None else int(k_inf)
        cloud = sample_particles(law, k_inf, shape.M, seed).positions
        support, weights, _ = nnls_subsample(cloud, csys)
        support_size = len(support)
        if jitter is None:
            jitter = 1e-3 * float(cloud.std())
        start = expand_support(
            support, weights, shape.K, jitter, seed + 1, shape.weight_function
        )
    else:
        raise ValueError(f"unknown init method {method!r}")
    system, report = constraint_flow(start, csys, tol=tol, max_iters=max_iters, h0=h0)
    report.support_size = support_size
    return system, report
