"""Exact 1D symmetric multi-marginal transport oracle for repulsive pair costs.

For a non-atomic 1D law with CDF F and M marginals, the optimal symmetric
plan is generated by the cyclic map

    T(x) = F^{-1}(F(x) + 1/M)          where F(x) <  (M-1)/M,
    T(x) = F^{-1}(F(x) - (M-1)/M)      otherwise,

which is increasing on each quantile cell [d_i, d_{i+1}] (where
mu([d_i, d_{i+1}]) = 1/M) and satisfies T^(M) = identity mu-a.e. The optimal
cost is the integral of the pairwise cost along orbits,
``int c(x, T(x), ..., T^(M-1)(x)) dmu(x)``, evaluated here by adaptive
Gauss-Kronrod quadrature on each quantile cell (the integrand is smooth inside
cells; all kinks sit at the quantiles).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .measures import Density1D

__all__ = ["OptimalMap1D", "build_map", "optimal_cost", "plan_support", "QuadratureError"]


class QuadratureError(RuntimeError):
    """Adaptive quadrature failed to reach the requested accuracy."""


# Gauss-Kronrod 7-15 nodes and weights on [-1, 1] (QUADPACK values).
_GK_NODES = np.array(
    [
        -0.991455371120812639206854697526329,
        -0.949107912342758524526189684047851,
        -0.864864423359769072789712788640926,
        -0.741531185599394439863864773280788,
        -0.586087235467691130294144838258730,
        -0.405845151377397166906606412076961,
        -0.207784955007898467600689403773245,
        0.0,
        0.207784955007898467600689403773245,
        0.405845151377397166906606412076961,
        0.586087235467691130294144838258730,
        0.741531185599394439863864773280788,
        0.864864423359769072789712788640926,
        0.949107912342758524526189684047851,
        0.991455371120812639206854697526329,
    ]
)
_GK_WEIGHTS = np.array(
    [
        0.022935322010529224963732008058970,
        0.063092092629978553290700663189204,
        0.104790010322250183839876322541518,
        0.140653259715525918745189590510238,
        0.169004726639267902826583426598550,
        0.190350578064785409913256402421014,
        0.204432940075298892414161999234649,
        0.209482141084727828012999174891714,
        0.204432940075298892414161999234649,
        0.190350578064785409913256402421014,
        0.169004726639267902826583426598550,
        0.140653259715525918745189590510238,
        0.104790010322250183839876322541518,
        0.063092092629978553290700663189204,
        0.022935322010529224963732008058970,
    ]
)
_G7_WEIGHTS = np.array(
    [
        0.129484966168869693270611432679082,
        0.279705391489276667901467771423780,
        0.381830050505118944950369775488975,
        0.417959183673469387755102040816327,
        0.381830050505118944950369775488975,
        0.279705391489276667901467771423780,
        0.129484966168869693270611432679082,
    ]
)
_G7_SLICE = slice(1, 15, 2)


def _adaptive_gk15(f, a: float, b: float, tol: float, max_intervals: int = 4096) -> float:
    """Globally adaptive Gauss-Kronrod integration with batched evaluations."""
    stack = [(a, b)]
    total = 0.0
    budget = max_intervals
    while stack:
        if budget <= 0:
            raise QuadratureError("quadrature interval budget exhausted")
        lo = np.array([s[0] for s in stack])
        hi = np.array([s[1] for s in stack])
        mid = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        points = (mid[:, None] + half[:, None] * _GK_NODES[None, :]).ravel()
        vals = f(points).reshape(len(stack), 15)
        k15 = half * (vals @ _GK_WEIGHTS)
        g7 = half * (vals[:, _G7_SLICE] @ _G7_WEIGHTS)
        err = np.abs(k15 - g7)
        share = tol * (hi - lo) / (b - a)
        done = err <= np.maximum(share, 1e-16 * np.abs(k15))
        total += float(k15[done].sum())
        next_stack = []
        for i in np.nonzero(~done)[0]:
            next_stack.append((lo[i], mid[i]))
            next_stack.append((mid[i], hi[i]))
        budget -= len(stack)
        stack = next_stack
    return total


@dataclass(frozen=True)
class OptimalMap1D:
    """Cyclic optimal map of a 1D law for M symmetric marginals."""

    law: Density1D
    marginals: int
    quantiles: np.ndarray = field(repr=False)

    def transport(self, x) -> np.ndarray:
        """One application of the cyclic map T."""
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        m = self.marginals
        f = self.law.cdf(x)
        level = np.where(f < (m - 1.0) / m, f + 1.0 / m, f - (m - 1.0) / m)
        out = np.asarray(self.law.quantile(np.clip(level, 0.0, 1.0)))
        return float(out[0]) if scalar else out

    def iterate(self, x, times: int) -> np.ndarray:
        out = np.asarray(x, dtype=float)
        for _ in range(times):
            out = self.transport(out)
        return out

    def orbit(self, x) -> np.ndarray:
        """Orbit matrix (len(x), M): columns are x, T(x), ..., T^(M-1)(x)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        cols = np.empty((len(x), self.marginals))
        cols[:, 0] = x
        for i in range(1, self.marginals):
            cols[:, i] = self.transport(cols[:, i - 1])
        return cols


def build_map(law: Density1D, marginals: int) -> OptimalMap1D:
    """Quantile cells and cyclic map for a non-atomic 1D law on a compact support."""
    if not isinstance(law, Density1D):
        raise ValueError("the 1D oracle needs a density law with a continuous CDF")
    if marginals < 2:
        raise ValueError("need at least two marginals")
    levels = np.arange(marginals + 1) / marginals
    quantiles = np.asarray(law.quantile(levels))
    quantiles[0], quantiles[-1] = law.support
    return OptimalMap1D(law=law, marginals=marginals, quantiles=quantiles)


def _pair_cost(orbit: np.ndarray, epsilon: float) -> np.ndarray:
    m = orbit.shape[1]
    iu, ju = np.triu_indices(m, k=1)
    gaps = np.abs(orbit[:, iu] - orbit[:, ju])
    return (2.0 / (epsilon + gaps)).sum(axis=1)


def optimal_cost(transport_map: OptimalMap1D, epsilon: float, tol: float = 1e-8) -> float:
    """Exact transport cost for the regularized pairwise-repulsion cost.

    Integrates ``c(x, T(x), ..., T^(M-1)(x))`` against the law piecewise over
    the quantile cells to absolute accuracy ``tol``.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    law = transport_map.law

    def integrand(x: np.ndarray) -> np.ndarray:
        return _pair_cost(transport_map.orbit(x), epsilon) * law.density(x)

    total = 0.0
    cells = transport_map.quantiles
    for lo, hi in zip(cells[:-1], cells[1:]):
        if hi <= lo:
            continue
        total += _adaptive_gk15(integrand, float(lo), float(hi), tol / transport_map.marginals)
    return total


def plan_support(transport_map: OptimalMap1D, grid: int) -> np.ndarray:
    """(grid, M) array of orbits on a uniform grid over the support."""
    if grid < 2:
        raise ValueError("grid must have at least two points")
    a, b = transport_map.law.support
    x = np.linspace(a, b, grid)
    return transport_map.orbit(x)
