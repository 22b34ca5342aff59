import numpy as np
import pytest
from hypothesis import settings

from laplace_tht.fem import assemble, build_mesh, point_source
from laplace_tht.fields import CovarianceModel, random_field

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")


@pytest.fixture(scope="session")
def mesh21():
    return build_mesh(21, 100.0)


@pytest.fixture(scope="session")
def ops21_const(mesh21):
    return assemble(mesh21, 1e-4, 1e-5)


@pytest.fixture(scope="session")
def field21_random(mesh21):
    return random_field(mesh21, CovarianceModel(0.8, 100.0), seed=0)


@pytest.fixture(scope="session")
def ops21_random(mesh21, field21_random):
    return assemble(mesh21, field21_random.values, 1e-5)


@pytest.fixture(scope="session")
def source21(ops21_const):
    return ops21_const.restrict(point_source(ops21_const.mesh, (50.0, 50.0)))


def random_pencil(n, seed):
    """Small symmetric positive definite pencil (K, M) as sparse matrices."""
    import scipy.sparse as sp

    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    K = A @ A.T + n * np.eye(n)
    B = rng.standard_normal((n, n))
    M = B @ B.T / n + np.eye(n)
    return sp.csc_matrix(K), sp.csc_matrix(M)
