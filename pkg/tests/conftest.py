import numpy as np
import pytest

from mcot.measures import Density1D, GaussianMixture, UniformBall


@pytest.fixture(scope="session")
def mu1_1d():
    return Density1D.uniform()


@pytest.fixture(scope="session")
def mu2_1d():
    return Density1D(
        support=(-1.0, 1.0),
        poly_coeffs=(0.46,),
        cosine_terms=((np.pi / 10.0, 5.0 * np.pi / 2.0),),
    )


@pytest.fixture(scope="session")
def mu3_1d():
    return Density1D(
        support=(-1.0, 1.0),
        poly_coeffs=(0.48,),
        cosine_terms=((0.13 * np.pi, 13.0 * np.pi / 2.0),),
    )


@pytest.fixture(scope="session")
def gauss3d():
    return GaussianMixture.standard(3)


@pytest.fixture(scope="session")
def mixture3d():
    return GaussianMixture(
        weights=(2.0 / 3.0, 1.0 / 3.0),
        means=((0.0, 0.0, 0.0), (2.0, 2.0, 2.0)),
        covariances=(
            ((1.0, 0.5, 0.75), (0.5, 2.0, 1.5), (0.75, 1.5, 3.0)),
            ((1.0, 0.8, 0.22), (0.8, 2.0, 1.8), (0.22, 1.8, 3.0)),
        ),
    )


@pytest.fixture(scope="session")
def spread_mixture3d():
    c = ((1.0, 0.5, 0.75), (0.5, 2.0, 1.5), (0.75, 1.5, 3.0))
    means = [(4.0 * i, 0.0, 0.0) for i in range(6)]
    return GaussianMixture(
        weights=(0.1, 0.2, 0.2, 0.2, 0.2, 0.1),
        means=tuple(means),
        covariances=(c,) * 6,
    )


@pytest.fixture(scope="session")
def ball3d():
    return UniformBall(center=(0.0, 0.0, 0.0), radius=1.0)
