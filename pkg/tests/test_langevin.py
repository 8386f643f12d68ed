"""Outer optimizer: schedules, step adaptation, determinism, descent."""

import numpy as np
import pytest

from mcot.basis import MonomialBasis, legendre_basis
from mcot.initialization import make_feasible_system
from mcot.langevin import (
    LangevinParams,
    StallError,
    adapt_time_step,
    noise_schedule_step,
    run,
)
from mcot.measures import GaussianMixture
from mcot.model import ConstraintSystem, CoulombCost, ParticleSystem, SystemShape


def test_noise_schedule_constant():
    for n in (0, 5, 1000):
        assert noise_schedule_step(0.1, n, "constant") == 0.1


def test_noise_schedule_sqrt_closed_form():
    beta = 1.0
    for n in range(3):
        beta = noise_schedule_step(beta, n, "sqrt_decay")
    assert beta == pytest.approx(0.5, abs=1e-15)  # beta_3 = beta_0 / sqrt(4)


def test_noise_schedule_telescoping():
    beta = 1.0
    for n in range(99):
        beta = noise_schedule_step(beta, n, "sqrt_decay")
    assert beta == pytest.approx(0.1, abs=1e-12)


def test_noise_schedule_first_step():
    assert noise_schedule_step(1.0, 0, "sqrt_decay") == pytest.approx(np.sqrt(0.5))


class AffineConstraints:
    def __init__(self, matrix, rhs):
        self.matrix = np.asarray(matrix, dtype=float)
        self.rhs = np.asarray(rhs, dtype=float)
        self.n_rows = len(rhs)

    def constraints_flat(self, y):
        return self.matrix @ y - self.rhs

    def constraints_and_jacobian_flat(self, y):
        return self.constraints_flat(y), self.matrix.copy()


def test_adapt_time_step_doubling_branch():
    # Linear Gamma, beta=0: the doubling test is |Gamma(y) - 2dt * B grad|.
    rng = np.random.default_rng(0)
    mat = rng.standard_normal((2, 6))
    y = rng.standard_normal(6)
    csys = AffineConstraints(mat, mat @ y)  # feasible at y
    grad = rng.standard_normal(6)
    drift = np.abs(mat @ grad).max()
    dt = 1e-3
    tau = 4.0 * dt * drift  # comfortably above the 2dt drift
    new_dt, lam = adapt_time_step(csys, y, grad, np.zeros(2), dt, 0.0, tau, np.zeros(6))
    assert new_dt == 2.0 * dt


def test_adapt_time_step_halving_matches_affine_expansion():
    rng = np.random.default_rng(1)
    mat = rng.standard_normal((2, 6))
    y = rng.standard_normal(6)
    csys = AffineConstraints(mat, mat @ y)
    grad = rng.standard_normal(6)
    drift = np.abs(mat @ grad).max()
    dt = 1.0
    tau = 0.3 * dt * drift  # forces halving; exact threshold known analytically
    lam0 = np.ones(2)
    new_dt, lam = adapt_time_step(csys, y, grad, lam0, dt, 0.0, tau, np.zeros(6))
    # |Gamma| at step s is exactly s * drift; halve until s * drift < tau.
    expected_dt = dt
    halvings = 0
    while expected_dt * drift >= tau:
        expected_dt /= 2
        halvings += 1
    assert new_dt == expected_dt
    np.testing.assert_allclose(lam, lam0 / 2**halvings)


def test_adapt_time_step_stall():
    mat = np.ones((1, 2))
    csys = AffineConstraints(mat, np.zeros(1))
    with pytest.raises(StallError):
        adapt_time_step(csys, np.zeros(2), np.ones(2), np.zeros(1), 1.0, 0.0, 0.0, np.zeros(2))


def test_unconstrained_quadratic_descent():
    # N=0: plain gradient descent with the adaptive step, bounded by dt_max.
    law = GaussianMixture.standard(3)
    basis = MonomialBasis(law, [])
    shape = SystemShape(2, 2, 3)
    csys = ConstraintSystem(basis, shape)

    class Quadratic(CoulombCost):
        def __init__(self):
            super().__init__(1.0)

        def cost_flat(self, flat, shape):
            return 0.5 * float(flat @ flat)

        def gradient_flat(self, flat, shape):
            return flat.copy()

    sys0 = ParticleSystem(np.random.default_rng(2).standard_normal((2, 2, 3)))
    params = LangevinParams(dt0=1e-4, beta0=0.0, tau0=1.0, n_max=40, seed=0, dt_max=1.0)
    best, log = run(sys0, csys, Quadratic(), params)
    costs = [r.cost for r in log.accepted_records()]
    assert all(b <= a + 1e-15 for a, b in zip(costs, costs[1:]))
    assert np.linalg.norm(log.best_state) <= 1e-6


def test_determinism_bitwise(tmp_path, mu2_1d):
    basis = legendre_basis(mu2_1d, 6)
    shape = SystemShape(30, 3, 1)
    csys = ConstraintSystem(basis, shape)
    sys0, _ = make_feasible_system(mu2_1d, csys, seed=3, tol=1e-12, max_iters=5000)
    cost = CoulombCost(0.1)
    params = LangevinParams(dt0=1e-3, beta0=0.05, tau0=1e-2, n_max=50, seed=9,
                            noise_schedule="sqrt_decay")
    logs = []
    for rep in range(2):
        _, log = run(sys0, csys, cost, params)
        path = tmp_path / f"runlog_{rep}.csv"
        log.to_csv(path)
        logs.append(path.read_bytes())
    assert logs[0] == logs[1]


def test_run_requires_feasible_start(mu2_1d):
    basis = legendre_basis(mu2_1d, 6)
    shape = SystemShape(10, 3, 1)
    csys = ConstraintSystem(basis, shape)
    sys0 = ParticleSystem(np.random.default_rng(0).uniform(-1, 1, (10, 3, 1)))
    with pytest.raises(ValueError, match="tau0"):
        run(sys0, csys, CoulombCost(0.1), LangevinParams(tau0=1e-10, n_max=5))


def test_every_accepted_state_feasible_and_best_tracked(mu2_1d):
    basis = legendre_basis(mu2_1d, 6)
    shape = SystemShape(40, 3, 1)
    csys = ConstraintSystem(basis, shape)
    sys0, _ = make_feasible_system(mu2_1d, csys, seed=4, tol=1e-12, max_iters=5000)
    cost = CoulombCost(0.1)
    params = LangevinParams(dt0=1e-3, beta0=0.02, tau0=1e-2, n_max=300, seed=5,
                            projection_tol=1e-12, snapshot_iterations=(0, 100))
    best, log = run(sys0, csys, cost, params)
    acc = log.accepted_records()
    assert all(r.constraint_inf <= 1e-12 for r in acc[1:])
    running = np.minimum.accumulate([r.cost for r in acc])
    assert log.best_cost == pytest.approx(running[-1])
    assert log.best_cost <= acc[0].cost
    assert set(log.snapshots) == {0, 100}
    # Returned system reproduces the best recorded cost.
    assert cost.cost(best) == pytest.approx(log.best_cost, abs=1e-12)


def test_run_honors_iteration_count(mu2_1d):
    basis = legendre_basis(mu2_1d, 4)
    shape = SystemShape(20, 3, 1)
    csys = ConstraintSystem(basis, shape)
    sys0, _ = make_feasible_system(mu2_1d, csys, seed=6, tol=1e-12, max_iters=5000)
    _, log = run(sys0, csys, CoulombCost(0.1),
                 LangevinParams(dt0=1e-3, tau0=1e-2, n_max=25, seed=1))
    assert log.accepted_iterations == 25
    assert log.accepted_records()[-1].n == 25


def test_relaxation_sandwich_desk_scale(mu1_1d):
    # Nested Legendre bases: more constraints -> larger relaxed optimum,
    # bounded above by the exact transport cost (small-scale variant).
    from mcot.model import SquaredWeight
    from mcot.oracle1d import build_map, optimal_cost

    oracle = optimal_cost(build_map(mu1_1d, 3), 0.1)
    bests = {}
    for size in (4, 8):
        basis = legendre_basis(mu1_1d, size)
        shape = SystemShape(60, 3, 1, SquaredWeight())
        csys = ConstraintSystem(basis, shape)
        sys0, _ = make_feasible_system(mu1_1d, csys, seed=7, tol=1e-12, max_iters=8000)
        _, log = run(sys0, csys, CoulombCost(0.1),
                     LangevinParams(dt0=1e-3, tau0=1e-2, n_max=1500, seed=7))
        bests[size] = log.best_cost
    slack = 0.01 * oracle
    assert bests[4] <= bests[8] + slack
    assert bests[8] <= oracle + slack
