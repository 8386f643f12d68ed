"""Families of differentiable polynomial test functions with exact target moments.

Three constructions are provided:

* ``legendre_basis`` -- scaled Legendre polynomials on [-1, 1] for 1D laws,
* ``hyperbolic_cross_basis`` -- tensor products of per-coordinate orthonormal
  polynomials in 3D, truncated by the hyperbolic-cross rule
  ``(l1+1)(l2+1)(l3+1) <= L``,
* ``mean_covariance_basis`` -- the nine first/second-order monomials in 3D.

Every basis function is a polynomial with an explicit coefficient
representation, so gradients are exact. Target moments are computed through
the exact moment interface of :mod:`mcot.measures`; their accuracy bounds the
feasibility the particle solver can reach.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .measures import Density1D, GaussianMixture, MarginalLaw, MomentTable, UniformBall

__all__ = [
    "TestBasis",
    "LegendreBasis",
    "TensorPolynomialBasis",
    "MonomialBasis",
    "SingularMomentMatrixError",
    "legendre_basis",
    "orthonormal_marginal_polynomials",
    "hyperbolic_cross_basis",
    "hyperbolic_cross_indices",
    "mean_covariance_basis",
]


class SingularMomentMatrixError(RuntimeError):
    """The moment (Hankel) matrix is numerically singular.

    Signals a degenerate marginal or an excessive polynomial degree.
    """


class TestBasis:
    """Ordered family of N differentiable test functions with target moments.

    Subclasses implement vectorized evaluation; instances are immutable after
    construction and safe to evaluate concurrently.
    """

    size: int
    dimension: int
    provenance: str
    target_moments: np.ndarray

    def values(self, points: np.ndarray) -> np.ndarray:
        """Evaluate all functions at ``points`` (Q, d); returns (Q, N)."""
        raise NotImplementedError

    def values_and_gradients(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return values (Q, N) and gradients (Q, N, d) at ``points``."""
        raise NotImplementedError

    def coefficient_rows(self) -> list[dict]:
        """Audit rows (one per function): label, target moment, coefficients."""
        raise NotImplementedError

    def _check_points(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != self.dimension:
            raise ValueError(f"points must have shape (Q, {self.dimension})")
        return points


# ---------------------------------------------------------------------------
# Scaled Legendre basis (1D)
# ---------------------------------------------------------------------------


def _legendre_values_and_derivatives(x: np.ndarray, max_degree: int):
    """Values and derivatives of Legendre P_0..P_max via the three-term recurrences."""
    vals = np.polynomial.legendre.legvander(x, max_degree)
    ders = np.zeros_like(vals)
    if max_degree >= 1:
        ders[:, 1] = 1.0
    for n in range(1, max_degree):
        # P'_{n+1} = P'_{n-1} + (2n+1) P_n
        ders[:, n + 1] = ders[:, n - 1] + (2 * n + 1) * vals[:, n]
    return vals, ders


class LegendreBasis(TestBasis):
    """phi_n = sqrt(2n + 1/2) / (n + 1) * P_n for n = 1..N.

    Degree zero is excluded: total mass is a structural constraint handled by
    the particle weights, not a test function.
    """

    provenance = "Legendre1D"
    dimension = 1

    def __init__(self, law: MarginalLaw, size: int):
        if size < 1:
            raise ValueError("need at least one test function")
        if law.dimension != 1:
            raise ValueError("Legendre basis applies to 1D laws")
        self.size = int(size)
        self.law = law
        n = np.arange(1, self.size + 1)
        self._scales = np.sqrt(2.0 * n + 0.5) / (n + 1.0)
        self.target_moments = self._integrate_targets(law)

    def _integrate_targets(self, law: MarginalLaw) -> np.ndarray:
        if not isinstance(law, Density1D):
            raise ValueError("Legendre targets require a 1D density law")
        a, b = law.support
        x, w = np.polynomial.legendre.leggauss(max(128, self.size + 48))
        t = 0.5 * (b - a) * x + 0.5 * (a + b)
        vals = self.values(t.reshape(-1, 1))
        dens = law.density(t)
        return 0.5 * (b - a) * (vals * (w * dens)[:, None]).sum(axis=0)

    def values(self, points: np.ndarray) -> np.ndarray:
        points = self._check_points(points)
        vals, _ = _legendre_values_and_derivatives(points[:, 0], self.size)
        return vals[:, 1:] * self._scales

    def values_and_gradients(self, points: np.ndarray):
        points = self._check_points(points)
        vals, ders = _legendre_values_and_derivatives(points[:, 0], self.size)
        return vals[:, 1:] * self._scales, (ders[:, 1:] * self._scales)[:, :, None]

    def coefficient_rows(self) -> list[dict]:
        rows = []
        for i in range(self.size):
            coef = np.zeros(self.size + 1)
            coef[i + 1] = self._scales[i]
            mono = np.polynomial.legendre.leg2poly(coef)
            rows.append(
                {
                    "index": i + 1,
                    "label": f"legendre_deg_{i + 1}",
                    "target_moment": float(self.target_moments[i]),
                    "coefficients": " ".join(repr(float(c)) for c in mono),
                }
            )
        return rows


def legendre_basis(law: MarginalLaw, size: int) -> LegendreBasis:
    """Scaled Legendre test functions of degrees 1..size with exact targets."""
    return LegendreBasis(law, size)


# ---------------------------------------------------------------------------
# Per-coordinate orthonormal polynomials and tensor basis (3D)
# ---------------------------------------------------------------------------


def _standardized_law(law: MarginalLaw) -> tuple[MarginalLaw, np.ndarray, np.ndarray]:
    """Affinely rescale a 3D law to zero mean and unit per-coordinate variance.

    Working in standardized coordinates keeps every moment O(1), so the
    Gram-Schmidt construction below never hits catastrophic cancellation even
    for widely spread mixtures.
    """
    locs = law.mean()
    scales = np.sqrt(np.diag(law.covariance()))
    if np.any(scales <= 0):
        raise SingularMomentMatrixError("law has a degenerate (zero-variance) coordinate")
    if isinstance(law, GaussianMixture):
        means = (np.asarray(law.means) - locs) / scales
        covs = np.asarray(law.covariances) / np.outer(scales, scales)
        std = GaussianMixture(
            weights=law.weights,
            means=tuple(tuple(m) for m in means),
            covariances=tuple(tuple(tuple(r) for r in c) for c in covs),
        )
        return std, locs, scales
    if isinstance(law, UniformBall):
        # All marginal variances of a ball coincide, so one common scale keeps
        # the standardized law an (origin-centered) ball.
        s = float(scales[0])
        scales = np.full(law.dimension, s)
        std = UniformBall(center=tuple(0.0 for _ in law.center), radius=law.radius / s)
        return std, np.asarray(law.center, dtype=float), scales
    raise ValueError(f"unsupported law kind for tensor bases: {type(law).__name__}")


def _orthonormal_coefficients(moments: np.ndarray, max_degree: int) -> np.ndarray:
    """Coefficients (rows) of orthonormal polynomials under a moment inner product.

    Modified Gram-Schmidt on the monomial basis with a second re-orthogonalization
    pass; ``moments[p]`` must hold E[t^p] for p = 0..2*max_degree.
    """
    size = max_degree + 1
    hankel = np.empty((size, size))
    for a in range(size):
        hankel[a] = moments[a : a + size]
    q = np.zeros((size, size))
    for l in range(size):
        v = np.zeros(size)
        v[l] = 1.0
        for _ in range(2):
            for k in range(l):
                v = v - (v @ hankel @ q[k]) * q[k]
        norm2 = float(v @ hankel @ v)
        if not np.isfinite(norm2) or norm2 <= 1e-13 * float(hankel[l, l]):
            raise SingularMomentMatrixError(
                f"moment matrix numerically singular at degree {l} "
                "(degenerate marginal or excessive degree)"
            )
        v = v / np.sqrt(norm2)
        if v[l] < 0:
            v = -v
        q[l] = v
    return q


@dataclass(frozen=True)
class _CoordinateFamily:
    """Orthonormal 1D family for one coordinate, in standardized variables."""

    loc: float
    scale: float
    coeffs: np.ndarray  # (L, L) rows: coefficients in t = (x - loc)/scale

    def as_polynomials(self) -> list[np.polynomial.Polynomial]:
        polys = []
        for row in self.coeffs:
            polys.append(
                np.polynomial.Polynomial(
                    row,
                    domain=[self.loc - self.scale, self.loc + self.scale],
                    window=[-1.0, 1.0],
                )
            )
        return polys


def _coordinate_family(
    law: MarginalLaw, coordinate: int, max_degree: int, scaled_norms: bool = True
) -> _CoordinateFamily:
    if law.dimension != 3:
        raise ValueError("tensor polynomial construction expects a 3D law")
    if not 0 <= coordinate < 3:
        raise ValueError("coordinate must be in {0, 1, 2}")
    if max_degree > 12:
        raise ValueError("max_degree above 12 is not supported (conditioning)")
    std, locs, scales = _standardized_law(law)
    e = np.zeros(3, dtype=int)
    e[coordinate] = 1
    moments = np.array(
        [std.monomial_moment(tuple(e * p)) for p in range(2 * max_degree + 1)]
    )
    coeffs = _orthonormal_coefficients(moments, max_degree)
    if scaled_norms:
        # ||P_l|| = 1/(l+1) in L2(mu): down-weights high degrees.
        coeffs = coeffs / (np.arange(max_degree + 1) + 1.0)[:, None]
    return _CoordinateFamily(loc=float(locs[coordinate]), scale=float(scales[coordinate]), coeffs=coeffs)


def orthonormal_marginal_polynomials(
    law: MarginalLaw, coordinate: int, max_degree: int, scaled_norms: bool = True
) -> list[np.polynomial.Polynomial]:
    """Orthogonal polynomials of the coordinate marginal of a 3D law.

    ``P_l`` has degree ``l`` and satisfies
    ``int P_l P_l' dmu = delta_{l,l'} / (l+1)^2`` (or plain orthonormality when
    ``scaled_norms`` is False). Coordinates are 0-based.
    """
    fam = _coordinate_family(law, coordinate, max_degree, scaled_norms)
    return fam.as_polynomials()


def hyperbolic_cross_indices(budget: int) -> np.ndarray:
    """All (l1, l2, l3) >= 0 with (l1+1)(l2+1)(l3+1) <= budget, (0,0,0) included.

    Sorted by (product, lexicographic) for a deterministic constraint order.
    """
    if budget < 1:
        return np.zeros((0, 3), dtype=int)
    out = []
    for l1 in range(budget):
        if l1 + 1 > budget:
            break
        for l2 in range(budget):
            p12 = (l1 + 1) * (l2 + 1)
            if p12 > budget:
                break
            l3_max = budget // p12 - 1
            for l3 in range(l3_max + 1):
                out.append((p12 * (l3 + 1), l1, l2, l3))
    out.sort()
    return np.array([(l1, l2, l3) for _, l1, l2, l3 in out], dtype=int)


class TensorPolynomialBasis(TestBasis):
    """Tensor products of per-coordinate orthonormal polynomials in 3D."""

    provenance = "HyperbolicCross3D"
    dimension = 3

    def __init__(
        self,
        law: MarginalLaw,
        index_set: np.ndarray,
        scaled_norms: bool = True,
    ):
        index_set = np.asarray(index_set, dtype=int)
        if index_set.ndim != 2 or index_set.shape[1] != 3:
            raise ValueError("index_set must have shape (N, 3)")
        self.index_set = index_set
        self.size = len(index_set)
        self.law = law
        max_deg = int(index_set.max(initial=0))
        self._families = [
            _coordinate_family(law, j, max_deg, scaled_norms) for j in range(3)
        ]
        self._locs = np.array([f.loc for f in self._families])
        self._scales = np.array([f.scale for f in self._families])
        self.target_moments = self._exact_targets(law)

    def _exact_targets(self, law: MarginalLaw) -> np.ndarray:
        # Multivariate moments of the standardized law (coordinates may be
        # correlated, so targets are NOT products of 1D moments).
        std, _, _ = _standardized_law(law)
        max_total = int(self.index_set.sum(axis=1).max(initial=0))
        table = MomentTable(std, max_total)
        targets = np.empty(self.size)
        for n, (l1, l2, l3) in enumerate(self.index_set):
            c1 = self._families[0].coeffs[l1, : l1 + 1]
            c2 = self._families[1].coeffs[l2, : l2 + 1]
            c3 = self._families[2].coeffs[l3, : l3 + 1]
            acc = 0.0
            for a in range(l1 + 1):
                if c1[a] == 0.0:
                    continue
                for b in range(l2 + 1):
                    if c2[b] == 0.0:
                        continue
                    for c in range(l3 + 1):
                        if c3[c] == 0.0:
                            continue
                        acc += c1[a] * c2[b] * c3[c] * table.value((a, b, c))
            targets[n] = acc
        return targets

    def _power_matrices(self, points: np.ndarray) -> list[np.ndarray]:
        t = (points - self._locs) / self._scales
        mats = []
        for j in range(3):
            L = self._families[j].coeffs.shape[0]
            m = np.empty((len(points), L))
            m[:, 0] = 1.0
            for p in range(1, L):
                m[:, p] = m[:, p - 1] * t[:, j]
            mats.append(m)
        return mats

    def values(self, points: np.ndarray) -> np.ndarray:
        points = self._check_points(points)
        pw = self._power_matrices(points)
        v = [pw[j] @ self._families[j].coeffs.T for j in range(3)]
        i1, i2, i3 = self.index_set.T
        return v[0][:, i1] * v[1][:, i2] * v[2][:, i3]

    def values_and_gradients(self, points: np.ndarray):
        points = self._check_points(points)
        pw = self._power_matrices(points)
        vals = []
        ders = []
        for j in range(3):
            coeffs = self._families[j].coeffs
            dcoeffs = coeffs[:, 1:] * np.arange(1, coeffs.shape[1]) / self._scales[j]
            vals.append(pw[j] @ coeffs.T)
            ders.append(pw[j][:, : dcoeffs.shape[1]] @ dcoeffs.T)
        i1, i2, i3 = self.index_set.T
        v1, v2, v3 = vals[0][:, i1], vals[1][:, i2], vals[2][:, i3]
        phi = v1 * v2 * v3
        grad = np.empty((len(points), self.size, 3))
        grad[:, :, 0] = ders[0][:, i1] * v2 * v3
        grad[:, :, 1] = v1 * ders[1][:, i2] * v3
        grad[:, :, 2] = v1 * v2 * ders[2][:, i3]
        return phi, grad

    def coefficient_rows(self) -> list[dict]:
        rows = []
        for n, (l1, l2, l3) in enumerate(self.index_set):
            coef_txt = []
            for j, l in enumerate((l1, l2, l3)):
                fam = self._families[j]
                coef_txt.append(
                    f"coord{j + 1}[loc={fam.loc!r},scale={fam.scale!r}]:"
                    + " ".join(repr(float(c)) for c in fam.coeffs[l, : l + 1])
                )
            rows.append(
                {
                    "index": n + 1,
                    "label": f"tensor_{l1}_{l2}_{l3}",
                    "target_moment": float(self.target_moments[n]),
                    "coefficients": " | ".join(coef_txt),
                }
            )
        return rows


def hyperbolic_cross_basis(
    law: MarginalLaw, size: int, scaled_norms: bool = True
) -> TensorPolynomialBasis:
    """Tensor basis over the hyperbolic-cross index set, (0,0,0) excluded.

    ``size + 1`` must be an attainable index-set cardinality; e.g. sizes
    27, 37, 43, 52, 55, 73 for per-coordinate degrees 6..11.
    """
    if law.dimension != 3:
        raise ValueError("hyperbolic-cross basis expects a 3D law")
    budget = None
    for candidate in range(1, 14 * 14 * 14):
        count = len(hyperbolic_cross_indices(candidate))
        if count == size + 1:
            budget = candidate
            break
        if count > size + 1:
            break
    if budget is None:
        attainable = sorted(
            {len(hyperbolic_cross_indices(c)) - 1 for c in range(2, 14)} | {27, 37, 43, 52, 55, 73}
        )
        raise ValueError(
            f"no hyperbolic-cross budget yields {size} test functions; "
            f"nearby attainable sizes include {attainable}"
        )
    indices = hyperbolic_cross_indices(budget)
    indices = indices[~np.all(indices == 0, axis=1)]
    return TensorPolynomialBasis(law, indices, scaled_norms=scaled_norms)


# ---------------------------------------------------------------------------
# Plain monomial bases (mean/covariance constraints)
# ---------------------------------------------------------------------------


class MonomialBasis(TestBasis):
    """Explicit monomial test functions x^alpha for a list of multi-indices."""

    provenance = "MeanCovariance3D"

    def __init__(self, law: MarginalLaw, exponents: Iterable[tuple[int, ...]]):
        self.law = law
        self.dimension = law.dimension
        self.exponents = np.asarray(list(exponents), dtype=int).reshape(-1, law.dimension)
        self.size = len(self.exponents)
        self.target_moments = np.array(
            [law.monomial_moment(tuple(e)) for e in self.exponents]
        )

    def values(self, points: np.ndarray) -> np.ndarray:
        points = self._check_points(points)
        out = np.ones((len(points), self.size))
        for j in range(self.dimension):
            e = self.exponents[:, j]
            out *= points[:, j][:, None] ** e[None, :]
        return out

    def values_and_gradients(self, points: np.ndarray):
        points = self._check_points(points)
        q, d = points.shape
        per_coord = np.empty((d, q, self.size))
        for j in range(d):
            per_coord[j] = points[:, j][:, None] ** self.exponents[:, j][None, :]
        vals = per_coord.prod(axis=0)
        grad = np.empty((q, self.size, d))
        for j in range(d):
            e = self.exponents[:, j]
            dj = np.where(
                e[None, :] > 0,
                e[None, :] * points[:, j][:, None] ** np.maximum(e[None, :] - 1, 0),
                0.0,
            )
            others = np.ones((q, self.size))
            for jj in range(d):
                if jj != j:
                    others *= per_coord[jj]
            grad[:, :, j] = dj * others
        return vals, grad

    def coefficient_rows(self) -> list[dict]:
        rows = []
        for n, e in enumerate(self.exponents):
            rows.append(
                {
                    "index": n + 1,
                    "label": "monomial_" + "_".join(str(v) for v in e),
                    "target_moment": float(self.target_moments[n]),
                    "coefficients": " ".join(str(v) for v in e),
                }
            )
        return rows


def mean_covariance_basis(law: MarginalLaw) -> MonomialBasis:
    """The nine test functions x1, x2, x3, x1^2, x2^2, x3^2, x1x2, x1x3, x2x3."""
    if law.dimension != 3:
        raise ValueError("mean-covariance basis expects a 3D law")
    exponents = [
        (1, 0, 0),
        (0, 1, 0),
        (0, 0, 1),
        (2, 0, 0),
        (0, 2, 0),
        (0, 0, 2),
        (1, 1, 0),
        (1, 0, 1),
        (0, 1, 1),
    ]
    return MonomialBasis(law, exponents)
