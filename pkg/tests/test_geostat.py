import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from laplace_tht.adjoint import Experiment
from laplace_tht.errors import FactorizationError, InvalidArgumentError
from laplace_tht.fem import build_mesh
from laplace_tht.fields import CovarianceModel, covariance_matrix, random_field
from laplace_tht.geostat import (
    InversionProblem,
    LinearForward,
    THTForward,
    gauss_newton_step,
    invert,
    objective,
    objective_terms,
    relative_l2,
    solve_saddle,
    synthetic_measurements,
)


def _linear_instance(seed, n_y=6, n_s=15, noise=1e-2):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 10, (n_s, 2))
    Q = covariance_matrix(pts, CovarianceModel(1.5, 4.0))
    H = rng.standard_normal((n_y, n_s))
    s_true = 2.0 + np.linalg.cholesky(Q) @ rng.standard_normal(n_s)
    y = H @ s_true + noise * rng.standard_normal(n_y)
    R = noise**2 * (1 + rng.uniform(0, 1, n_y))
    return InversionProblem(y, Q, LinearForward(H), R=R), H


def _joint_minimizer(problem, H):
    """Minimize the objective over (s, beta) from its normal equations, with explicit inverses."""
    Qi = np.linalg.inv(problem.Q)
    Ri = np.diag(1.0 / problem.R)
    X = problem.X
    n_s, p = X.shape
    A = np.block([[H.T @ Ri @ H + Qi, -Qi @ X], [-X.T @ Qi, X.T @ Qi @ X]])
    rhs = np.concatenate([H.T @ Ri @ problem.y, np.zeros(p)])
    sol = np.linalg.solve(A, rhs)
    return sol[:n_s], sol[n_s:]


def test_objective_zero_at_prior_mean():
    problem, H = _linear_instance(0)
    s = 3.0 * np.ones(problem.n_s)
    problem.y = H @ s
    assert objective(problem, s, [3.0]) == pytest.approx(0.0, abs=1e-20)


def test_whitening_identity():
    problem, _ = _linear_instance(1)
    L = np.linalg.cholesky(problem.Q)
    s = problem.X @ [0.7] + L[:, 0]
    _, prior = objective_terms(problem, s, [0.7], h=problem.y)
    assert prior == pytest.approx(0.5, rel=1e-10)


@given(seed=st.integers(0, 10_000))
def test_objective_dense_oracle(seed):
    problem, H = _linear_instance(seed)
    rng = np.random.default_rng(seed + 1)
    s = rng.standard_normal(problem.n_s)
    beta = rng.standard_normal(1)
    r = problem.y - H @ s
    d = s - problem.X @ beta
    ref = 0.5 * r @ np.diag(1 / problem.R) @ r + 0.5 * d @ np.linalg.inv(problem.Q) @ d
    assert objective(problem, s, beta) == pytest.approx(ref, rel=1e-10)


def test_scalar_saddle_by_hand():
    # [[J q J + r, J x], [J x, 0]] [xi, beta] = [t, 0]  =>  xi = 0, beta = t / (J x)
    J, q, r, x, t = np.array([[2.0]]), np.array([[3.0]]), np.array([0.5]), np.array([[1.5]]), 4.0
    xi, beta, QJt, resid, drift = solve_saddle(J, q, r, x, np.array([t]))
    assert xi[0] == pytest.approx(0.0, abs=1e-15)
    assert beta[0] == pytest.approx(t / 3.0)
    assert QJt[0, 0] == 6.0
    assert resid <= 1e-15


def test_saddle_residual_and_drift():
    problem, H = _linear_instance(3)
    xi, beta, QJt, resid, drift = solve_saddle(H, problem.Q, problem.R, problem.X, problem.y)
    assert resid <= 1e-10
    assert np.linalg.norm((H @ problem.X).T @ xi) <= 1e-10 * np.linalg.norm(H @ problem.X) \
        * np.linalg.norm(xi)
    assert drift <= 1e-10


def test_saddle_rank_deficient_drift():
    Q = np.eye(3)
    J = np.array([[1.0, -1.0, 0.0]])  # annihilates the constant drift
    with pytest.raises(FactorizationError, match="J X"):
        solve_saddle(J, Q, np.array([1.0]), np.ones((3, 1)), np.array([1.0]))


def test_linear_one_step():
    problem, H = _linear_instance(4)
    s_ref, beta_ref = _joint_minimizer(problem, H)
    s0 = np.random.default_rng(9).standard_normal(problem.n_s)
    it = gauss_newton_step(problem, s0, problem.drift_fit(s0), damping=False)
    np.testing.assert_allclose(it.s, s_ref, rtol=1e-8, atol=1e-8)
    np.testing.assert_allclose(it.beta, beta_ref, rtol=1e-8)
    assert it.alpha == 1.0 and it.accepted


def test_linear_invert_matches_gls():
    problem, H = _linear_instance(5, noise=1e-3)
    s_ref, beta_ref = _joint_minimizer(problem, H)
    res = invert(problem, np.zeros(problem.n_s), max_gn=5, rtol=1e-8)
    assert res.converged and res.reason in ("step", "objective")
    assert len(res.history) <= 3
    np.testing.assert_allclose(res.s, s_ref, rtol=1e-7, atol=1e-7)
    assert res.objectives[-1] == pytest.approx(objective(problem, s_ref, beta_ref), rel=1e-8)


def test_gls_optimality():
    # gradient of the objective vanishes at the estimate
    problem, H = _linear_instance(6)
    res = invert(problem, np.zeros(problem.n_s), rtol=1e-10)
    Qi = np.linalg.inv(problem.Q)
    d = res.s - problem.X @ res.beta
    grad_s = -H.T @ ((problem.y - H @ res.s) / problem.R) + Qi @ d
    grad_b = -problem.X.T @ Qi @ d
    scale = np.linalg.norm(H.T @ (problem.y / problem.R))
    assert np.linalg.norm(grad_s) <= 1e-8 * scale
    assert np.linalg.norm(grad_b) <= 1e-8 * scale


def test_single_step_with_huge_rtol():
    problem, _ = _linear_instance(7)
    res = invert(problem, np.zeros(problem.n_s), max_gn=1, rtol=1e10)
    assert len(res.history) == 2


def test_max_gn_validation():
    problem, _ = _linear_instance(7)
    with pytest.raises(InvalidArgumentError):
        invert(problem, np.zeros(problem.n_s), max_gn=0)


def test_problem_validation():
    Q = np.eye(3)
    fwd = LinearForward(np.eye(3))
    with pytest.raises(InvalidArgumentError):
        InversionProblem(np.ones(3), np.ones((3, 2)), fwd)
    with pytest.raises(InvalidArgumentError):
        InversionProblem(np.ones(3), np.triu(np.ones((3, 3))), fwd)
    with pytest.raises(InvalidArgumentError):
        InversionProblem(np.ones(3), Q, fwd, R=0.0)
    with pytest.raises(InvalidArgumentError):
        InversionProblem(np.ones(3), Q, fwd, X=np.ones((2, 1)))
    with pytest.raises(InvalidArgumentError):
        InversionProblem(np.ones(3), Q, fwd, X=np.ones((3, 2)))


class _Cubic:
    """``h(s) = H s + c (H s)^3``: nonlinear enough to need damping."""

    def __init__(self, H, c):
        self.H, self.c = H, c

    def predict(self, s):
        u = self.H @ s
        return u + self.c * u**3

    def __call__(self, s):
        u = self.H @ s
        return u + self.c * u**3, (1 + 3 * self.c * u**2)[:, None] * self.H


def test_damping_monotone_on_nonlinear_problem():
    rng = np.random.default_rng(8)
    n_s, n_y = 12, 8
    H = rng.standard_normal((n_y, n_s)) / np.sqrt(n_s)
    Q = covariance_matrix(rng.uniform(0, 5, (n_s, 2)), CovarianceModel(1.0, 2.0))
    fwd = _Cubic(H, 0.5)
    s_true = rng.standard_normal(n_s) * 2
    problem = InversionProblem(fwd.predict(s_true), Q, fwd, R=1e-4)
    res = invert(problem, np.zeros(n_s), max_gn=15, rtol=1e-6)
    f = res.objectives
    assert np.all(np.diff(f) <= 0)
    alphas = [h["alpha"] for h in res.history[1:]]
    assert alphas[0] < 1.0 and alphas[-1] == 1.0
    assert res.converged


def test_undamped_step_can_increase():
    # the same cubic problem without damping: the first step overshoots
    rng = np.random.default_rng(8)
    n_s, n_y = 12, 8
    H = rng.standard_normal((n_y, n_s)) / np.sqrt(n_s)
    Q = covariance_matrix(rng.uniform(0, 5, (n_s, 2)), CovarianceModel(1.0, 2.0))
    fwd = _Cubic(H, 0.5)
    problem = InversionProblem(fwd.predict(rng.standard_normal(n_s) * 2), Q, fwd, R=1e-4)
    s0 = np.zeros(n_s)
    b0 = problem.drift_fit(s0)
    f0 = objective(problem, s0, b0)
    undamped = gauss_newton_step(problem, s0, b0, f_old=f0, damping=False)
    assert undamped.objective > f0
    damped = gauss_newton_step(problem, s0, b0, f_old=f0)
    assert damped.objective <= f0
    assert damped.alpha == 0.125


def test_no_decrease_after_damping():
    rng = np.random.default_rng(8)
    n_s, n_y = 12, 8
    H = rng.standard_normal((n_y, n_s)) / np.sqrt(n_s)
    Q = covariance_matrix(rng.uniform(0, 5, (n_s, 2)), CovarianceModel(1.0, 2.0))
    fwd = _Cubic(H, 5.0)
    problem = InversionProblem(fwd.predict(rng.standard_normal(n_s) * 2), Q, fwd, R=1e-4)
    res = invert(problem, np.zeros(n_s))
    assert not res.converged and res.reason == "no decrease after damping"
    assert len(res.history) == 2
    np.testing.assert_array_equal(res.s, np.zeros(n_s))


def test_relative_l2():
    t = np.array([1.0, 2.0, 2.0])
    assert relative_l2(t, t) == 0.0
    assert relative_l2(2 * t, t) == pytest.approx(1.0)
    assert relative_l2(np.array([1.0, 0.0, 0.0]), t, np.array([True, False, False])) == 0.0


@pytest.fixture(scope="module")
def tht21():
    mesh = build_mesh(21, 100.0)
    truth = random_field(mesh, CovarianceModel(0.8, 100.0), seed=3)
    g = np.linspace(20.0, 80.0, 6)
    ex = Experiment([(50.0, 50.0)], 8.5e-4, [(x, y) for x in g for y in g],
                    [480.0, 600.0, 1200.0], n_quad=20)
    y, clean = synthetic_measurements(mesh, truth.log_values, ex, noise_percent=2.0, seed=0)
    return mesh, truth, ex, y, clean


def test_synthetic_measurements(tht21):
    mesh, truth, ex, y, clean = tht21
    assert y.shape == clean.shape == (108,)
    assert np.all(clean > 0)
    rel = (y - clean) / clean
    assert 0.01 < rel.std() < 0.03
    # time stepping and the Laplace solver agree well below the noise level
    fwd = THTForward(mesh, ex)
    h = fwd.predict(truth.log_values)
    assert np.max(np.abs(h - clean) / clean) < 1e-3
    with pytest.raises(InvalidArgumentError):
        ex2 = Experiment(ex.sources, ex.rates, ex.receivers[:1], [60.0, 100.5])
        synthetic_measurements(mesh, truth.log_values, ex2, dt=1.0)


def test_tht_inversion_small(tht21):
    mesh, truth, ex, y, clean = tht21
    Q = covariance_matrix(mesh.centroids, CovarianceModel(0.8, 100.0))
    R = (0.02 * y) ** 2
    fwd = THTForward(mesh, ex)
    problem = InversionProblem(y, Q, fwd, R=R)
    res = invert(problem, np.full(mesh.n_elements, truth.mean_log), max_gn=15)
    f = res.objectives
    assert np.all(np.diff(f) <= 0)
    assert res.converged
    for h in res.history[1:]:
        assert h["saddle_residual"] <= 1e-10
        assert h["drift_residual"] <= 1e-10
    # chi^2 sanity with the correctly specified noise
    chi2 = 2 * res.history[-1]["misfit"]
    assert 0.3 * y.size <= chi2 <= 3 * y.size
    c = mesh.centroids
    box = np.all((c >= 20.0) & (c <= 80.0), axis=1)
    prior_err = relative_l2(np.full(mesh.n_elements, truth.mean_log), truth.log_values, box)
    assert relative_l2(res.s, truth.log_values, box) < prior_err
