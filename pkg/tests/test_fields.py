import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from laplace_tht.errors import FactorizationError, InvalidArgumentError
from laplace_tht.fem import build_mesh
from laplace_tht.fields import (
    DEFAULT_MEAN_LOG,
    CovarianceModel,
    FieldRealization,
    cell_centers,
    covariance_matrix,
    franke,
    franke_field,
    jittered_cholesky,
    random_field,
    read_field_csv,
    sample_field,
    write_field_csv,
)


def test_default_mean_is_log_1e4():
    assert DEFAULT_MEAN_LOG == pytest.approx(np.log(1e-4), abs=1e-15)


@pytest.mark.parametrize("theta, ell", [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0)])
def test_model_validation(theta, ell):
    with pytest.raises(InvalidArgumentError):
        CovarianceModel(theta, ell)


def test_unknown_kind():
    with pytest.raises(InvalidArgumentError):
        CovarianceModel(1.0, 1.0, kind="gaussian")


def test_single_point():
    Q = covariance_matrix([[3.0, 4.0]], CovarianceModel(1.7, 10.0))
    np.testing.assert_array_equal(Q, [[1.7]])


def test_coincident_points_rank_one():
    Q = covariance_matrix([[1.0, 1.0], [1.0, 1.0]], CovarianceModel(2.0, 5.0))
    np.testing.assert_allclose(Q, 2.0 * np.ones((2, 2)))
    assert np.linalg.matrix_rank(Q) == 1


def test_matches_kernel_oracle():
    rng = np.random.default_rng(4)
    pts = rng.uniform(0, 100, (10, 2))
    model = CovarianceModel(1.6, 100.0)
    Q = covariance_matrix(pts, model)
    for i in range(10):
        for j in range(10):
            r = np.hypot(*(pts[i] - pts[j])) / 100.0
            assert abs(Q[i, j] - 1.6 * np.exp(-r)) <= 1e-14


def test_psd_on_grid():
    g = np.linspace(0, 100, 40)
    pts = np.array([(x, y) for x in g for y in g])
    theta = 1.6
    Q = covariance_matrix(pts, CovarianceModel(theta, 100.0))
    assert np.allclose(Q, Q.T)
    assert np.linalg.eigvalsh(Q).min() >= -1e-10 * theta


def test_zero_covariance_gives_constant_field():
    f = sample_field(np.zeros((5, 5)), -3.0, seed=1)
    np.testing.assert_array_equal(f.log_values, -3.0)


def test_seed_determinism():
    Q = covariance_matrix(np.random.default_rng(0).uniform(0, 1, (30, 2)),
                          CovarianceModel(1.0, 0.5))
    a = sample_field(Q, 0.0, 11).log_values
    b = sample_field(Q, 0.0, 11).log_values
    c = sample_field(Q, 0.0, 12).log_values
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_marginal_variance_monte_carlo():
    pts = np.array([[0.0, 0.0], [30.0, 0.0], [0.0, 60.0]])
    theta = 1.6
    C = jittered_cholesky(covariance_matrix(pts, CovarianceModel(theta, 100.0)))
    draws = np.array([sample_field(C @ C.T, 0.0, s).log_values[0] for s in range(10_000)])
    assert abs(draws.var() - theta) <= 0.05 * theta


def test_correlation_decay_monte_carlo():
    ell = 50.0
    d = np.array([0.0, 25.0, 50.0, 100.0])
    pts = np.column_stack([d, np.zeros_like(d)])
    Q = covariance_matrix(pts, CovarianceModel(1.0, ell))
    C = jittered_cholesky(Q)
    rng = np.random.default_rng(7)
    Z = C @ rng.standard_normal((4, 20_000))
    emp = np.corrcoef(Z)[0]
    np.testing.assert_allclose(emp[1:], np.exp(-d[1:] / ell), rtol=0.2)


def test_cholesky_jitter_rescues_semidefinite():
    Q = np.ones((4, 4))
    C = jittered_cholesky(Q)
    np.testing.assert_allclose(C @ C.T, Q, atol=1e-8)


def test_cholesky_gives_up_on_indefinite():
    with pytest.raises(FactorizationError):
        jittered_cholesky(np.diag([1.0, -1.0]))


def test_field_realization_rejects_nonfinite():
    with pytest.raises(InvalidArgumentError):
        FieldRealization(np.array([0.0, np.nan]), 0.0)


def test_franke_known_values():
    # 30-digit evaluations of the four-exponential formula
    assert franke(0.0, 0.0) == pytest.approx(0.766420591284923132, abs=1e-14)
    assert franke(0.5, 0.5) == pytest.approx(0.325762089280684133, abs=1e-14)


def test_franke_variance_and_mean():
    m = build_mesh(21, 100.0)
    f = franke_field(m, 1.6, mean_log=-9.0)
    assert f.log_values.var() == pytest.approx(1.6, abs=1e-10)
    assert f.log_values.mean() == pytest.approx(-9.0, abs=1e-12)


def test_franke_tiny_variance():
    m = build_mesh(11, 1.0)
    f = franke_field(m, 1e-12)
    np.testing.assert_allclose(f.log_values, DEFAULT_MEAN_LOG, atol=1e-5)


def test_franke_preserves_argmax():
    m = build_mesh(21, 100.0)
    c = m.centroids / 100.0
    raw = franke(c[:, 0], c[:, 1])
    assert np.argmax(franke_field(m, 0.8).log_values) == np.argmax(raw)


def test_franke_rejects_nonpositive_variance():
    with pytest.raises(InvalidArgumentError):
        franke_field(build_mesh(3, 1.0), 0.0)


def test_random_field_cell_resolution_pairs():
    m = build_mesh(9, 100.0)
    f = random_field(m, CovarianceModel(1.0, 100.0), seed=3)
    np.testing.assert_array_equal(f.log_values[0::2], f.log_values[1::2])
    assert cell_centers(m).shape == ((9 - 1) ** 2, 2)


def test_random_field_element_resolution():
    m = build_mesh(6, 100.0)
    f = random_field(m, CovarianceModel(1.0, 100.0), seed=3, resolution="element")
    assert f.log_values.shape == (m.n_elements,)
    assert not np.array_equal(f.log_values[0::2], f.log_values[1::2])
    with pytest.raises(InvalidArgumentError):
        random_field(m, CovarianceModel(1.0, 100.0), resolution="node")


def test_csv_roundtrip(tmp_path):
    m = build_mesh(6, 100.0)
    f = random_field(m, CovarianceModel(0.8, 100.0), seed=5)
    p = write_field_csv(tmp_path / "f.csv", m, f)
    g = read_field_csv(p, m)
    np.testing.assert_array_equal(g.log_values, f.log_values)
    with pytest.raises(InvalidArgumentError):
        read_field_csv(p, build_mesh(5, 100.0))


@given(st.floats(0.05, 5.0), st.floats(-12.0, 0.0))
def test_franke_affine_property(var, mean):
    m = build_mesh(6, 1.0)
    f = franke_field(m, var, mean)
    assert f.log_values.var() == pytest.approx(var, rel=1e-9)
    assert np.all(np.isfinite(f.values)) and np.all(f.values > 0)
