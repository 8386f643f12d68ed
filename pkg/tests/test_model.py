"""Cost, gradients, constraints and Jacobians against naive oracles and FD."""

import numpy as np
import pytest

from mcot.basis import hyperbolic_cross_basis, legendre_basis, mean_covariance_basis
from mcot.model import (
    ConstraintSystem,
    CoulombCost,
    ExponentialWeight,
    ParticleSystem,
    SquaredWeight,
    SystemShape,
    load_particle_snapshot,
    save_particle_snapshot,
    theta_functional,
    weight_function_from_name,
)


def naive_cost(positions, weights, eps):
    total = 0.0
    K, M, _ = positions.shape
    for k in range(K):
        ck = 0.0
        for m in range(M):
            for mp in range(M):
                if m != mp:
                    ck += 1.0 / (eps + np.linalg.norm(positions[k, m] - positions[k, mp]))
        total += weights[k] * ck
    return total


def random_system(rng, K, M, d, mode):
    positions = rng.standard_normal((K, M, d))
    if mode == "fixed":
        return ParticleSystem(positions)
    wf = SquaredWeight() if mode == "squared" else ExponentialWeight()
    params = wf.preimage(rng.uniform(0.5, 1.5, K))
    return ParticleSystem(positions, weight_params=params, weight_function=wf)


def fd_gradient(f, x, h=1e-6):
    out = np.empty_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (f(xp) - f(xm)) / (2 * h)
    return out


def test_cost_examples():
    cost = CoulombCost(0.1)
    sys1 = ParticleSystem(np.array([[[0.0], [1.0]]]))
    assert cost.cost(sys1) == pytest.approx(2 / 1.1, abs=1e-14)
    sys2 = ParticleSystem(np.array([[[0.0], [1.0], [2.0]]]))
    assert CoulombCost(0.0).cost(sys2) == pytest.approx(5.0, abs=1e-14)
    duplicated = ParticleSystem(np.tile(sys1.positions, (2, 1, 1)))
    assert cost.cost(duplicated) == pytest.approx(cost.cost(sys1), abs=1e-14)


def test_cost_gradient_example():
    cost = CoulombCost(0.1)
    sys1 = ParticleSystem(np.array([[[0.0], [1.0]]]))
    grad = cost.cost_gradient(sys1)
    assert grad[0] == pytest.approx(2 / 1.21, abs=1e-12)


def test_cost_matches_naive_loop():
    rng = np.random.default_rng(1)
    sys = random_system(rng, 4, 6, 3, "squared")
    cost = CoulombCost(0.05)
    assert cost.cost(sys) == pytest.approx(
        naive_cost(sys.positions, sys.weights, 0.05), abs=1e-12
    )


def test_cost_block_partition_consistency():
    # Evaluation must be independent of the particle blocking.
    import mcot.model as model

    rng = np.random.default_rng(2)
    sys = random_system(rng, 37, 5, 3, "fixed")
    cost = CoulombCost(0.01)
    full = cost.cost(sys)
    old = model._PAIR_BLOCK_DOUBLES
    try:
        model._PAIR_BLOCK_DOUBLES = 5 * 5 * 3 * 4  # forces tiny blocks
        assert cost.cost(sys) == pytest.approx(full, abs=1e-12)
    finally:
        model._PAIR_BLOCK_DOUBLES = old


def test_cost_permutation_invariance():
    rng = np.random.default_rng(3)
    sys = random_system(rng, 3, 7, 2, "fixed")
    cost = CoulombCost(0.1)
    base = cost.cost(sys)
    for _ in range(50):
        perm = rng.permutation(7)
        permuted = ParticleSystem(sys.positions[:, perm, :])
        assert cost.cost(permuted) == pytest.approx(base, abs=1e-12)


def test_cost_particle_relabeling_invariance(mu1_1d):
    rng = np.random.default_rng(4)
    sys = random_system(rng, 6, 3, 1, "squared")
    basis = legendre_basis(mu1_1d, 4)
    csys = ConstraintSystem(basis, sys.shape)
    cost = CoulombCost(0.1)
    perm = rng.permutation(6)
    permuted = ParticleSystem(
        sys.positions[perm],
        weight_params=sys.weight_params[perm],
        weight_function=sys.weight_function,
    )
    assert cost.cost(permuted) == pytest.approx(cost.cost(sys), abs=1e-13)
    np.testing.assert_allclose(
        csys.constraints(permuted), csys.constraints(sys), atol=1e-14
    )


def test_translation_invariance_of_gradient_sum():
    rng = np.random.default_rng(5)
    sys = random_system(rng, 2, 6, 3, "fixed")
    grad = CoulombCost(0.1).per_particle_gradient(sys.positions)
    # Sum over marginal slots vanishes for a pairwise translation-invariant cost.
    assert np.abs(grad.sum(axis=1)).max() <= 1e-13


def test_zero_epsilon_degenerate_behavior():
    positions = np.array([[[0.0], [0.0], [1.0]]])
    sys = ParticleSystem(positions)
    assert CoulombCost(0.0).cost(sys) == np.inf
    with pytest.raises(FloatingPointError):
        CoulombCost(0.0).per_particle_gradient(positions)


@pytest.mark.parametrize("d,M", [(1, 2), (1, 5), (1, 10), (3, 2), (3, 5), (3, 10)])
@pytest.mark.parametrize("mode", ["fixed", "squared", "exponential"])
def test_gradient_and_jacobian_match_fd(d, M, mode, request):
    rng = np.random.default_rng(hash((d, M, mode)) % 2**32)
    if d == 1:
        basis = legendre_basis(request.getfixturevalue("mu2_1d"), 5)
    else:
        basis = mean_covariance_basis(request.getfixturevalue("mixture3d"))
    sys = random_system(rng, 3, M, d, mode)
    shape = sys.shape
    cost = CoulombCost(0.1)
    csys = ConstraintSystem(basis, shape)
    flat = sys.flatten()

    grad = cost.gradient_flat(flat, shape)
    fd = fd_gradient(lambda x: cost.cost_flat(x, shape), flat)
    assert np.abs(grad - fd).max() <= 1e-6 * max(1.0, np.abs(grad).max())

    gamma, jac = csys.constraints_and_jacobian_flat(flat)
    for row in range(csys.n_rows):
        fd_row = fd_gradient(lambda x, r=row: csys.constraints_flat(x)[r], flat)
        assert np.abs(jac[row] - fd_row).max() <= 1e-6 * max(1.0, np.abs(jac).max())


def test_constraints_naive_resummation(mu2_1d):
    rng = np.random.default_rng(7)
    basis = legendre_basis(mu2_1d, 6)
    sys = random_system(rng, 5, 4, 1, "squared")
    csys = ConstraintSystem(basis, sys.shape)
    gamma = csys.constraints(sys)
    w = sys.weights
    naive = np.zeros(basis.size)
    for k in range(5):
        for m in range(4):
            naive += w[k] * basis.values(sys.positions[k, m].reshape(1, 1))[0] / 4
    naive -= basis.target_moments
    np.testing.assert_allclose(gamma[:-1], naive, atol=1e-14)
    assert gamma[-1] == pytest.approx(w.sum() - 1.0, abs=1e-14)


def test_constraint_zero_at_exact_moments(mu1_1d):
    # K=1, M=1 at x=0: phi_1(0) = 0 and the uniform target is 0.
    basis = legendre_basis(mu1_1d, 1)
    shape = SystemShape(1, 1, 1)
    csys = ConstraintSystem(basis, shape)
    gamma = csys.constraints_flat(np.array([0.0]))
    assert abs(gamma[0]) <= 1e-13


def test_row_counts(mu1_1d):
    basis = legendre_basis(mu1_1d, 5)
    assert ConstraintSystem(basis, SystemShape(4, 3, 1)).n_rows == 5
    assert ConstraintSystem(basis, SystemShape(4, 3, 1, SquaredWeight())).n_rows == 6


def test_adaptive_matches_fixed_at_unit_weights(mu2_1d):
    rng = np.random.default_rng(8)
    basis = legendre_basis(mu2_1d, 6)
    positions = rng.uniform(-1, 1, (5, 3, 1))
    fixed = ParticleSystem(positions)
    for wf in (SquaredWeight(), ExponentialWeight()):
        params = np.full(5, float(wf.preimage(np.asarray(1.0))))
        adaptive = ParticleSystem(positions, weight_params=params, weight_function=wf)
        ga = ConstraintSystem(basis, adaptive.shape).constraints(adaptive)
        gf = ConstraintSystem(basis, fixed.shape).constraints(fixed)
        np.testing.assert_allclose(ga[:-1], gf, atol=1e-14)
        assert abs(ga[-1]) <= 1e-14


def test_theta_examples():
    assert theta_functional(ParticleSystem(np.zeros((3, 4, 2)))) == 0.0
    sys = ParticleSystem(np.array([[[1.0], [-1.0]]]))
    assert theta_functional(sys) == pytest.approx(1.0, abs=1e-15)
    rng = np.random.default_rng(9)
    sys = random_system(rng, 4, 3, 2, "squared")
    naive = sum(
        sys.weights[k] * np.mean([np.dot(sys.positions[k, m], sys.positions[k, m])
                                  for m in range(3)])
        for k in range(4)
    )
    assert theta_functional(sys) == pytest.approx(naive, abs=1e-14)


def test_gram_matrix_symmetry_and_cross_state(mu2_1d):
    rng = np.random.default_rng(11)
    basis = legendre_basis(mu2_1d, 5)
    shape = SystemShape(8, 3, 1)
    csys = ConstraintSystem(basis, shape)
    a = rng.uniform(-1, 1, shape.n_coords)
    b = rng.uniform(-1, 1, shape.n_coords)
    g_aa = csys.gram(a)
    np.testing.assert_allclose(g_aa, g_aa.T, atol=1e-15)
    assert np.linalg.eigvalsh(g_aa).min() > 0
    g_ab = csys.gram(a, b)
    np.testing.assert_allclose(g_ab, csys.jacobian_flat(a) @ csys.jacobian_flat(b).T)


def test_weight_function_registry():
    assert isinstance(weight_function_from_name("squared"), SquaredWeight)
    assert isinstance(weight_function_from_name("exponential"), ExponentialWeight)
    with pytest.raises(ValueError, match="unknown weight function"):
        weight_function_from_name("cubic")


def test_snapshot_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    for mode in ("fixed", "squared"):
        sys = random_system(rng, 4, 3, 2, mode)
        path = tmp_path / f"state_{mode}.csv"
        save_particle_snapshot(path, sys, seed=1, iteration=7)
        loaded = load_particle_snapshot(path)
        np.testing.assert_allclose(loaded.positions, sys.positions, atol=1e-15)
        np.testing.assert_allclose(loaded.weights, sys.weights, atol=1e-12)
