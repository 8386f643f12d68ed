"""Particle systems, regularized Coulomb cost, and the averaged constraint map.

A particle is a weighted Dirac atom in (R^d)^M: one weight plus M points of
R^d. Fixed-weight systems carry weight 1/K per particle; adaptive systems
parameterize weights as w_k = f(a_k)/K through a nonnegative weight function f,
which removes the positivity constraint from the optimization.

The optimizer works on flat coordinate vectors. The layout is
``concat(positions.ravel(order='C'), weight_params)``: positions are indexed
(k, m, i) C-style, and the K weight parameters (adaptive mode only) follow.

Cost/constraint evaluations are pure reductions over particles; callers may
evaluate concurrently on distinct states.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .basis import TestBasis

__all__ = [
    "WeightFunction",
    "SquaredWeight",
    "ExponentialWeight",
    "weight_function_from_name",
    "SystemShape",
    "ParticleSystem",
    "CoulombCost",
    "ConstraintSystem",
    "theta_functional",
    "save_particle_snapshot",
    "load_particle_snapshot",
]

# Particles per block in pairwise-distance evaluations; bounds peak memory at
# roughly block * M^2 * d doubles.
_PAIR_BLOCK_DOUBLES = 4_000_000


class WeightFunction:
    """Nonnegative surjective map from weight parameters to particle weights."""

    name: str

    def value(self, a: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def derivative(self, a: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def preimage(self, w: np.ndarray) -> np.ndarray:
        """One parameter value with value(a) = w (w >= 0)."""
        raise NotImplementedError


class SquaredWeight(WeightFunction):
    """f(a) = a^2, surjective onto [0, inf)."""

    name = "squared"

    def value(self, a):
        return np.square(a)

    def derivative(self, a):
        return 2.0 * np.asarray(a)

    def preimage(self, w):
        return np.sqrt(w)


class ExponentialWeight(WeightFunction):
    """f(a) = exp(-a), surjective onto (0, inf)."""

    name = "exponential"

    def value(self, a):
        return np.exp(-np.asarray(a))

    def derivative(self, a):
        return -np.exp(-np.asarray(a))

    def preimage(self, w):
        return -np.log(w)


def weight_function_from_name(name: str) -> WeightFunction:
    table = {"squared": SquaredWeight, "exponential": ExponentialWeight}
    try:
        return table[name]()
    except KeyError:
        raise ValueError(f"unknown weight function {name!r}; choose from {sorted(table)}")


@dataclass(frozen=True)
class SystemShape:
    """Static layout of a particle system's flat coordinate vector."""

    K: int
    M: int
    d: int
    weight_function: WeightFunction | None = None

    @property
    def adaptive(self) -> bool:
        return self.weight_function is not None

    @property
    def n_position_coords(self) -> int:
        return self.K * self.M * self.d

    @property
    def n_coords(self) -> int:
        return self.n_position_coords + (self.K if self.adaptive else 0)

    def positions(self, flat: np.ndarray) -> np.ndarray:
        return flat[: self.n_position_coords].reshape(self.K, self.M, self.d)

    def params(self, flat: np.ndarray) -> np.ndarray | None:
        if not self.adaptive:
            return None
        return flat[self.n_position_coords :]

    def weights(self, flat: np.ndarray) -> np.ndarray:
        if self.adaptive:
            return self.weight_function.value(self.params(flat)) / self.K
        return np.full(self.K, 1.0 / self.K)


@dataclass
class ParticleSystem:
    """K weighted points in (R^d)^M.

    ``weight_params`` is None in fixed-weight mode (every particle weighs 1/K)
    and a length-K parameter vector in adaptive mode (w_k = f(a_k)/K).
    """

    positions: np.ndarray
    weight_params: np.ndarray | None = None
    weight_function: WeightFunction | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 3:
            raise ValueError("positions must have shape (K, M, d)")
        if (self.weight_params is None) != (self.weight_function is None):
            raise ValueError("adaptive mode needs both weight_params and weight_function")
        if self.weight_params is not None:
            self.weight_params = np.asarray(self.weight_params, dtype=float)
            if self.weight_params.shape != (self.positions.shape[0],):
                raise ValueError("weight_params must have shape (K,)")

    @property
    def K(self) -> int:
        return self.positions.shape[0]

    @property
    def M(self) -> int:
        return self.positions.shape[1]

    @property
    def d(self) -> int:
        return self.positions.shape[2]

    @property
    def shape(self) -> SystemShape:
        return SystemShape(self.K, self.M, self.d, self.weight_function)

    @property
    def weights(self) -> np.ndarray:
        return self.shape.weights(self.flatten())

    def flatten(self) -> np.ndarray:
        if self.weight_params is None:
            return self.positions.ravel().copy()
        return np.concatenate([self.positions.ravel(), self.weight_params])

    @classmethod
    def from_flat(cls, flat: np.ndarray, shape: SystemShape) -> "ParticleSystem":
        flat = np.asarray(flat, dtype=float)
        positions = shape.positions(flat).copy()
        params = shape.params(flat)
        return cls(
            positions=positions,
            weight_params=None if params is None else params.copy(),
            weight_function=shape.weight_function,
        )


# ---------------------------------------------------------------------------
# Regularized Coulomb cost
# ---------------------------------------------------------------------------


def _pair_blocks(K: int, M: int, d: int) -> int:
    block = max(1, _PAIR_BLOCK_DOUBLES // max(1, M * M * d))
    return min(block, K)


class CoulombCost:
    """c(x_1..x_M) = sum over ordered pairs m != m' of 1/(eps + |x_m - x_m'|).

    Each unordered pair is counted twice. With eps = 0, coincident points make
    the cost +inf and the gradient undefined.
    """

    def __init__(self, epsilon: float):
        if epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        self.epsilon = float(epsilon)

    def per_particle(self, positions: np.ndarray) -> np.ndarray:
        """Cost of each particle configuration; positions (K, M, d) -> (K,)."""
        K, M, d = positions.shape
        out = np.empty(K)
        block = _pair_blocks(K, M, d)
        iu = np.triu_indices(M, k=1)
        for s in range(0, K, block):
            x = positions[s : s + block]
            diff = x[:, :, None, :] - x[:, None, :, :]
            r = np.linalg.norm(diff, axis=-1)[:, iu[0], iu[1]]
            if self.epsilon == 0.0 and np.any(r == 0.0):
                vals = np.where(r == 0.0, np.inf, 2.0 / np.where(r == 0.0, 1.0, r))
                out[s : s + block] = vals.sum(axis=1)
            else:
                out[s : s + block] = (2.0 / (self.epsilon + r)).sum(axis=1)
        return out

    def per_particle_gradient(self, positions: np.ndarray) -> np.ndarray:
        """Gradient of the per-particle cost wrt positions; (K, M, d)."""
        K, M, d = positions.shape
        out = np.empty_like(positions)
        block = _pair_blocks(K, M, d)
        for s in range(0, K, block):
            x = positions[s : s + block]
            diff = x[:, :, None, :] - x[:, None, :, :]
            r = np.linalg.norm(diff, axis=-1)
            if self.epsilon == 0.0 and np.any((r == 0.0) & ~np.eye(M, dtype=bool)):
                raise FloatingPointError(
                    "cost gradient undefined: coincident points with epsilon = 0"
                )
            r[:, np.arange(M), np.arange(M)] = 1.0
            coef = 1.0 / (r * (self.epsilon + r) ** 2)
            coef[:, np.arange(M), np.arange(M)] = 0.0
            out[s : s + block] = -2.0 * np.einsum("kmn,kmni->kmi", coef, diff)
        return out

    def cost(self, sys: ParticleSystem) -> float:
        """Weighted total cost sum_k w_k c(X^k)."""
        return float(np.dot(sys.weights, self.per_particle(sys.positions)))

    def cost_flat(self, flat: np.ndarray, shape: SystemShape) -> float:
        w = shape.weights(flat)
        return float(np.dot(w, self.per_particle(shape.positions(flat))))

    def gradient_flat(self, flat: np.ndarray, shape: SystemShape) -> np.ndarray:
        """Gradient of the weighted cost in the flat coordinate layout."""
        positions = shape.positions(flat)
        w = shape.weights(flat)
        g_pos = self.per_particle_gradient(positions) * w[:, None, None]
        if not shape.adaptive:
            return g_pos.ravel()
        a = shape.params(flat)
        g_a = shape.weight_function.derivative(a) * self.per_particle(positions) / shape.K
        return np.concatenate([g_pos.ravel(), g_a])

    def cost_gradient(self, sys: ParticleSystem) -> np.ndarray:
        return self.gradient_flat(sys.flatten(), sys.shape)


# ---------------------------------------------------------------------------
# Constraint map and Jacobian
# ---------------------------------------------------------------------------


class ConstraintSystem:
    """Averaged moment-constraint map of a K-particle system and its Jacobian.

    Fixed-weight mode yields N rows (one per test function); adaptive mode
    appends one mass row ``sum_k f(a_k)/K - 1``. Row n of the Jacobian holds
    d/dY of ``sum_k w_k phi_n-average(X^k) - mu_n`` in the flat layout.
    """

    def __init__(self, basis: TestBasis, shape: SystemShape):
        if basis.dimension != shape.d:
            raise ValueError(
                f"basis dimension {basis.dimension} does not match system dimension {shape.d}"
            )
        self.basis = basis
        self.shape = shape

    @property
    def n_rows(self) -> int:
        return self.basis.size + (1 if self.shape.adaptive else 0)

    def _per_particle_averages(self, values: np.ndarray) -> np.ndarray:
        K, M = self.shape.K, self.shape.M
        return values.reshape(K, M, -1).mean(axis=1)

    def constraints_flat(self, flat: np.ndarray) -> np.ndarray:
        shape = self.shape
        pts = shape.positions(flat).reshape(-1, shape.d)
        w = shape.weights(flat)
        values = self.basis.values(pts)
        if not shape.adaptive:
            gamma = values.mean(axis=0) - self.basis.target_moments
            return gamma
        avg = self._per_particle_averages(values)
        gamma = avg.T @ w - self.basis.target_moments
        mass = w.sum() - 1.0
        return np.concatenate([gamma, [mass]])

    def jacobian_flat(self, flat: np.ndarray) -> np.ndarray:
        return self.constraints_and_jacobian_flat(flat)[1]

    def constraints_and_jacobian_flat(self, flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        shape = self.shape
        K, M, d = shape.K, shape.M, shape.d
        N = self.basis.size
        pts = shape.positions(flat).reshape(-1, d)
        w = shape.weights(flat)
        values, grads = self.basis.values_and_gradients(pts)
        point_w = np.repeat(w / M, M)
        jac = np.empty((self.n_rows, shape.n_coords))
        jac_pos = (grads * point_w[:, None, None]).transpose(1, 0, 2).reshape(N, K * M * d)
        jac[:N, : K * M * d] = jac_pos
        if not shape.adaptive:
            gamma = values.T @ point_w - self.basis.target_moments
            return gamma, jac
        avg = self._per_particle_averages(values)
        gamma = np.concatenate([avg.T @ w - self.basis.target_moments, [w.sum() - 1.0]])
        a = shape.params(flat)
        dfa = shape.weight_function.derivative(a) / K
        jac[:N, K * M * d :] = (avg * dfa[:, None]).T
        jac[N, : K * M * d] = 0.0
        jac[N, K * M * d :] = dfa
        return gamma, jac

    def constraints(self, sys: ParticleSystem) -> np.ndarray:
        return self.constraints_flat(sys.flatten())

    def jacobian(self, sys: ParticleSystem) -> np.ndarray:
        return self.jacobian_flat(sys.flatten())

    def gram(self, flat_a: np.ndarray, flat_b: np.ndarray | None = None) -> np.ndarray:
        """Cross-state Gram matrix J(a) @ J(b)^T driving the Newton projection."""
        jac_a = self.jacobian_flat(flat_a)
        jac_b = jac_a if flat_b is None else self.jacobian_flat(flat_b)
        return jac_a @ jac_b.T


def theta_functional(
    sys: ParticleSystem, theta: Callable[[np.ndarray], np.ndarray] | None = None
) -> float:
    """Diagnostic sum_k w_k * mean_m theta(|x^k_m|); theta defaults to r^2.

    The inequality bound on this quantity is never enforced by the dynamics;
    it is logged so a configured bound can be checked a posteriori.
    """
    radii = np.linalg.norm(sys.positions, axis=2)
    vals = radii**2 if theta is None else theta(radii)
    return float(np.dot(sys.weights, vals.mean(axis=1)))


# ---------------------------------------------------------------------------
# Particle snapshot persistence (CSV + JSON sidecar)
# ---------------------------------------------------------------------------


def save_particle_snapshot(
    path: str | Path, sys: ParticleSystem, seed: int | None = None, iteration: int | None = None
) -> None:
    """Write a long-format CSV (k, m, coordinate, value, weight) plus sidecar JSON."""
    path = Path(path)
    weights = sys.weights
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "m", "coordinate", "value", "weight"])
        for k in range(sys.K):
            for m in range(sys.M):
                for i in range(sys.d):
                    writer.writerow([k, m, i, repr(float(sys.positions[k, m, i])), repr(float(weights[k]))])
    sidecar = {
        "K": sys.K,
        "M": sys.M,
        "d": sys.d,
        "mode": "adaptive" if sys.weight_function is not None else "fixed",
        "weight_function": sys.weight_function.name if sys.weight_function else None,
        "seed": seed,
        "iteration": iteration,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def load_particle_snapshot(path: str | Path) -> ParticleSystem:
    """Inverse of :func:`save_particle_snapshot`."""
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    K, M, d = sidecar["K"], sidecar["M"], sidecar["d"]
    positions = np.zeros((K, M, d))
    weights = np.zeros(K)
    with path.open() as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            k, m, i = int(row["k"]), int(row["m"]), int(row["coordinate"])
            positions[k, m, i] = float(row["value"])
            weights[k] = float(row["weight"])
    if sidecar["mode"] == "adaptive":
        wf = weight_function_from_name(sidecar["weight_function"])
        params = wf.preimage(weights * K)
        return ParticleSystem(positions, weight_params=params, weight_function=wf)
    return ParticleSystem(positions)
