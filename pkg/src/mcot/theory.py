"""Constructive structure results for the particle problem, as runnable checks.

Two executable constructions:

* ``tchakaloff_reduce`` -- re-weight a discrete measure onto at most N+3 of
  its own atoms while preserving the N moment values, the total mass, the
  cost and the growth functional exactly (up to round-off). The reduction is
  Caratheodory pivoting: move along a null vector of the functional matrix
  until a weight hits zero, repeat.

* ``monotone_path`` -- a polygonal path in the feasible set between two
  feasible weighted systems along which the cost varies monotonically,
  provided K >= 2N + 6. Both endpoints are Tchakaloff-reduced; zero-weight
  slots are then shuttled and moved freely (they carry no functional mass),
  and a single linear weight trade connects the two reduced measures. The
  existence of such paths certifies that local minimizers are global.

Both operations treat a "point" as a full particle configuration in (R^d)^M.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import ConstraintSystem, CoulombCost

__all__ = [
    "WeightedAtomSet",
    "PolygonalPath",
    "ReductionError",
    "tchakaloff_reduce",
    "monotone_path",
]

_FEASIBILITY_TOL = 1e-9


class ReductionError(RuntimeError):
    """Null-space pivoting failed (ill-conditioned functional matrix)."""


@dataclass
class WeightedAtomSet:
    """Finitely many weighted atoms in (R^d)^M with cached functional values.

    ``phi_averages`` holds the per-atom averaged test-function values (n, N);
    ``costs`` and ``thetas`` the per-atom cost and growth functionals.
    """

    weights: np.ndarray
    atoms: np.ndarray  # (n, M, d)
    phi_averages: np.ndarray
    costs: np.ndarray
    thetas: np.ndarray
    eliminations: int = 0
    kept_indices: np.ndarray | None = None  # indices into the reduction input

    @property
    def size(self) -> int:
        return len(self.weights)

    def functional_vector(self) -> np.ndarray:
        """(moments..., mass, cost, theta) under the weighted atoms."""
        return np.concatenate(
            [
                self.phi_averages.T @ self.weights,
                [
                    self.weights.sum(),
                    float(self.costs @ self.weights),
                    float(self.thetas @ self.weights),
                ],
            ]
        )

    @classmethod
    def from_particles(
        cls,
        weights: np.ndarray,
        atoms: np.ndarray,
        csys: ConstraintSystem,
        cost: CoulombCost,
        theta: Callable[[np.ndarray], np.ndarray] | None = None,
    ) -> "WeightedAtomSet":
        weights = np.asarray(weights, dtype=float)
        atoms = np.asarray(atoms, dtype=float)
        n, m, d = atoms.shape
        basis = csys.basis
        values = basis.values(atoms.reshape(-1, d)).reshape(n, m, basis.size)
        radii = np.linalg.norm(atoms, axis=2)
        theta_vals = (radii**2 if theta is None else theta(radii)).mean(axis=1)
        return cls(
            weights=weights.copy(),
            atoms=atoms.copy(),
            phi_averages=values.mean(axis=1),
            costs=cost.per_particle(atoms),
            thetas=theta_vals,
        )


def _null_vector(matrix: np.ndarray) -> np.ndarray:
    """A unit null vector of a wide matrix, row-equilibrated for conditioning."""
    scale = np.abs(matrix).max(axis=1)
    scale[scale == 0.0] = 1.0
    try:
        _, _, vh = np.linalg.svd(matrix / scale[:, None])
    except np.linalg.LinAlgError as exc:
        # Retry with column scaling; the null space maps back through it.
        cscale = np.abs(matrix).max(axis=0)
        cscale[cscale == 0.0] = 1.0
        try:
            _, _, vh = np.linalg.svd(matrix / cscale[None, :])
        except np.linalg.LinAlgError:
            raise ReductionError("SVD failed on the functional matrix") from exc
        v = vh[-1] / cscale
        return v / np.linalg.norm(v)
    return vh[-1]


def tchakaloff_reduce(
    atom_set: WeightedAtomSet, moment_count: int | None = None
) -> WeightedAtomSet:
    """Reduce the support to at most N+3 atoms, preserving all functionals.

    The preserved vector is (moments_1..N, mass, cost, theta). Each pivot
    step finds a null vector of the functional matrix restricted to the
    active support and moves the weights along it until one hits zero; the
    direction sign is the one that zeroes a weight with the smallest step
    (ties to the lowest atom index).
    """
    n_funcs = atom_set.phi_averages.shape[1] if moment_count is None else moment_count
    target_support = n_funcs + 3
    weights = atom_set.weights.copy()
    active = weights > 0.0
    # Rows: phi averages, mass, cost, theta. Columns: atoms.
    full_matrix = np.vstack(
        [
            atom_set.phi_averages.T,
            np.ones(atom_set.size),
            atom_set.costs,
            atom_set.thetas,
        ]
    )
    eliminations = 0
    while int(active.sum()) > target_support:
        idx = np.nonzero(active)[0]
        null = _null_vector(full_matrix[:, idx])
        steps_pos = np.where(null > 1e-14, weights[idx] / np.where(null > 1e-14, null, 1.0), np.inf)
        steps_neg = np.where(null < -1e-14, weights[idx] / np.where(null < -1e-14, -null, 1.0), np.inf)
        t_pos, j_pos = steps_pos.min(), int(steps_pos.argmin())
        t_neg, j_neg = steps_neg.min(), int(steps_neg.argmin())
        if not np.isfinite(min(t_pos, t_neg)):
            raise ReductionError("null vector has no sign-definite component")
        if t_pos <= t_neg:
            weights[idx] -= t_pos * null
            weights[idx[j_pos]] = 0.0
        else:
            weights[idx] += t_neg * null
            weights[idx[j_neg]] = 0.0
        weights[idx] = np.maximum(weights[idx], 0.0)
        active = weights > 0.0
        eliminations += 1
    keep = np.nonzero(active)[0]
    return WeightedAtomSet(
        weights=weights[keep],
        atoms=atom_set.atoms[keep],
        phi_averages=atom_set.phi_averages[keep],
        costs=atom_set.costs[keep],
        thetas=atom_set.thetas[keep],
        eliminations=eliminations,
        kept_indices=keep,
    )


# ---------------------------------------------------------------------------
# Monotone polygonal paths
# ---------------------------------------------------------------------------


@dataclass
class PathBreakpoint:
    t: float
    weights: np.ndarray
    positions: np.ndarray  # (K, M, d)
    phase: str


@dataclass
class PolygonalPath:
    """Piecewise-linear path in (weights, positions); linear between breakpoints."""

    breakpoints: list[PathBreakpoint]

    def evaluate(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        ts = [bp.t for bp in self.breakpoints]
        if not 0.0 <= t <= 1.0:
            raise ValueError("path parameter must lie in [0, 1]")
        hi = int(np.searchsorted(ts, t, side="right"))
        hi = min(max(hi, 1), len(ts) - 1)
        lo = hi - 1
        a, b = self.breakpoints[lo], self.breakpoints[hi]
        span = b.t - a.t
        s = 0.0 if span <= 0 else (t - a.t) / span
        weights = (1 - s) * a.weights + s * b.weights
        positions = (1 - s) * a.positions + s * b.positions
        return weights, positions


def _embed(weights_small: np.ndarray, slots: np.ndarray, K: int) -> np.ndarray:
    out = np.zeros(K)
    out[slots] = weights_small
    return out


def monotone_path(
    start: tuple[np.ndarray, np.ndarray],
    end: tuple[np.ndarray, np.ndarray],
    csys: ConstraintSystem,
    cost: CoulombCost,
    theta: Callable[[np.ndarray], np.ndarray] | None = None,
) -> PolygonalPath:
    """Cost-monotone polygonal path between two feasible weighted systems.

    ``start`` and ``end`` are (weights, positions) pairs with positions of
    shape (K, M, d); both must satisfy the moment constraints and unit mass
    within 1e-9, and K must be at least 2N + 6.

    The chain: reduce the start weights onto <= N+3 atoms (weights-only
    segment), shuttle reduced atoms out of slots needed by the reduced end
    (zero-weight moves and equal-position weight transfers), move all
    zero-weight slots onto the end template, trade the two reduced weight
    vectors linearly (the only segment where the cost varies; it does so
    linearly), then mirror the construction into the end state.
    """
    w0, y0 = np.asarray(start[0], dtype=float), np.asarray(start[1], dtype=float)
    w1, y1 = np.asarray(end[0], dtype=float), np.asarray(end[1], dtype=float)
    if y0.shape != y1.shape or w0.shape != w1.shape:
        raise ValueError("start and end must have identical (K, M, d) shapes")
    K = y0.shape[0]
    n_moments = csys.basis.size
    if K < 2 * n_moments + 6:
        raise ValueError(f"need K >= 2N + 6 = {2 * n_moments + 6}, got K = {K}")

    set0 = WeightedAtomSet.from_particles(w0, y0, csys, cost, theta)
    set1 = WeightedAtomSet.from_particles(w1, y1, csys, cost, theta)
    for label, aset in (("start", set0), ("end", set1)):
        vec = aset.functional_vector()
        moment_err = np.abs(vec[:n_moments] - csys.basis.target_moments).max()
        mass_err = abs(vec[n_moments] - 1.0)
        if moment_err > _FEASIBILITY_TOL or mass_err > _FEASIBILITY_TOL:
            raise ValueError(
                f"{label} endpoint infeasible: moment error {moment_err:.2e}, "
                f"mass error {mass_err:.2e}"
            )

    red0 = tchakaloff_reduce(set0)
    red1 = tchakaloff_reduce(set1)

    # Slot bookkeeping: reduced supports must be disjoint before weights trade.
    keep0 = red0.kept_indices.copy()
    keep1 = red1.kept_indices.copy()

    breakpoints: list[PathBreakpoint] = []

    def add(phase: str, weights: np.ndarray, positions: np.ndarray):
        breakpoints.append(
            PathBreakpoint(t=0.0, weights=weights.copy(), positions=positions.copy(), phase=phase)
        )

    cur_w = w0.copy()
    cur_y = y0.copy()
    add("start", cur_w, cur_y)

    # Phase 1: reduce the start weights in place (linear in weights only).
    cur_w = _embed(red0.weights, keep0, K)
    add("reduce_start_weights", cur_w, cur_y)

    # Phase 1b: shuttle reduced-start atoms out of slots claimed by the end
    # support. A move is two segments: drag an empty slot onto the atom's
    # position, then shift the weight between the coinciding slots.
    conflicts = [s for s in keep0 if s in set(keep1)]
    for slot in conflicts:
        occupied = set(keep0) | set(keep1)
        free = next(i for i in range(K) if i not in occupied)
        cur_y = cur_y.copy()
        cur_y[free] = cur_y[slot]
        add("shuttle_position", cur_w, cur_y)
        cur_w = cur_w.copy()
        cur_w[free] = cur_w[slot]
        cur_w[slot] = 0.0
        add("shuttle_weight", cur_w, cur_y)
        keep0[keep0 == slot] = free

    # Phase 2: move every slot outside the live support onto the end template.
    live = set(keep0)
    cur_y = cur_y.copy()
    for slot in range(K):
        if slot not in live:
            cur_y[slot] = y1[slot]
    add("stage_end_template", cur_w, cur_y)

    # Phase 3: linear weight trade between the two reduced measures.
    cur_w = _embed(red1.weights, keep1, K)
    add("trade_weights", cur_w, cur_y)

    # Phase 4: park the now-unweighted start slots at their end positions.
    cur_y = cur_y.copy()
    for slot in range(K):
        if slot not in set(keep1):
            cur_y[slot] = y1[slot]
    add("clear_start_support", cur_w, cur_y)

    # Phase 5: expand the reduced end weights back to the full end state.
    add("expand_end_weights", w1, y1)

    times = np.linspace(0.0, 1.0, len(breakpoints))
    for bp, t in zip(breakpoints, times):
        bp.t = float(t)
    return PolygonalPath(breakpoints=breakpoints)
