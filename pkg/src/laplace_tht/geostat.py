"""Quasi-linear geostatistical inversion by damped Gauss-Newton.

Each iteration linearizes ``h`` about ``s_k`` and solves the saddle system

    [J Q J^T + R   J X] [xi  ]   [y - h(s_k) + J s_k]
    [(J X)^T       0  ] [beta] = [0                 ]

then sets ``s = X beta + Q J^T xi``. Only ``N_y + p`` unknowns are solved
for; ``Q`` is dense and never inverted except through its Cholesky factor
when the objective is evaluated.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .adjoint import Experiment, assemble_jacobian, predict
from .errors import FactorizationError, InvalidArgumentError
from .fem import Mesh2D, assemble, point_source
from .fields import jittered_cholesky
from .forward import crank_nicolson

log = logging.getLogger(__name__)


class LinearForward:
    """``h(s) = H s``; exact linearization, used for checks."""

    def __init__(self, H):
        self.H = np.asarray(H, dtype=float)

    def predict(self, s):
        return self.H @ s

    def __call__(self, s):
        return self.H @ s, self.H


class THTForward:
    """Heads and Jacobian of a pumping experiment as a function of log-conductivity."""

    def __init__(self, mesh: Mesh2D, experiment: Experiment, storativity=1e-5,
                 solver="flexible", tol=1e-10):
        self.mesh = mesh
        self.experiment = experiment
        self.storativity = storativity
        self.solver = solver
        self.tol = tol
        self.n_calls = 0

    def _ops(self, s):
        return assemble(self.mesh, np.exp(s), self.storativity)

    def predict(self, s):
        self.n_calls += 1
        return predict(self._ops(s), self.experiment, solver=self.solver, tol=self.tol)

    def __call__(self, s):
        self.n_calls += 1
        res = assemble_jacobian(self._ops(s), self.experiment, solver=self.solver, tol=self.tol)
        return res.predictions, res.J


@dataclass
class InversionProblem:
    """Data, structural parameters and forward map of one inversion.

    ``R`` is the diagonal of the noise covariance; ``X`` defaults to a
    single column of ones.
    """

    y: np.ndarray
    Q: np.ndarray
    forward: object
    R: np.ndarray | float = 1e-7
    X: np.ndarray | None = None
    _chol: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.Q = np.asarray(self.Q, dtype=float)
        n_s = self.Q.shape[0]
        if self.Q.shape != (n_s, n_s):
            raise InvalidArgumentError("Q must be square")
        if not np.allclose(self.Q, self.Q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.Q).max())):
            raise InvalidArgumentError("Q must be symmetric")
        self.R = np.broadcast_to(np.asarray(self.R, dtype=float), self.y.shape).copy()
        if np.any(self.R <= 0):
            raise InvalidArgumentError("R diagonal must be positive")
        self.X = np.ones((n_s, 1)) if self.X is None else np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        if self.X.shape[0] != n_s:
            raise InvalidArgumentError("X must have one row per unknown")
        if np.linalg.matrix_rank(self.X) < self.X.shape[1]:
            raise InvalidArgumentError("X must have full column rank")

    @property
    def n_s(self) -> int:
        return self.Q.shape[0]

    @property
    def chol(self) -> np.ndarray:
        if self._chol is None:
            self._chol = jittered_cholesky(self.Q)
        return self._chol

    def drift_fit(self, s) -> np.ndarray:
        """Least-squares ``beta`` for ``s ~ X beta``."""
        return np.linalg.lstsq(self.X, s, rcond=None)[0]


def objective_terms(problem: InversionProblem, s, beta, h=None):
    """``(misfit, prior)`` halves of the MAP objective."""
    s = np.asarray(s, dtype=float)
    if h is None:
        h = problem.forward.predict(s)
    r = problem.y - h
    misfit = 0.5 * float(np.sum(r * r / problem.R))
    d = s - problem.X @ np.atleast_1d(beta)
    try:
        v = sla.solve_triangular(problem.chol, d, lower=True, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise FactorizationError(f"prior whitening failed: {exc}") from exc
    prior = 0.5 * float(v @ v)
    return misfit, prior


def objective(problem: InversionProblem, s, beta, h=None) -> float:
    """``1/2 |y - h(s)|^2_{R^-1} + 1/2 |s - X beta|^2_{Q^-1}``."""
    misfit, prior = objective_terms(problem, s, beta, h)
    return misfit + prior


@dataclass
class GNIterate:
    s: np.ndarray
    beta: np.ndarray
    xi: np.ndarray
    h: np.ndarray
    objective: float
    misfit: float
    prior: float
    alpha: float
    step_norm: float
    saddle_residual: float
    drift_residual: float
    accepted: bool


def solve_saddle(J, Q, R, X, rhs_top):
    """Solve the saddle system; returns ``(xi, beta, relative residual, drift residual)``."""
    n_y = J.shape[0]
    QJt = Q @ J.T
    JX = J @ X
    p = X.shape[1]
    if np.linalg.matrix_rank(JX) < p:
        raise FactorizationError("saddle matrix is singular: drift block J X is rank deficient")
    A = np.zeros((n_y + p, n_y + p))
    A[:n_y, :n_y] = J @ QJt + np.diag(R)
    A[:n_y, n_y:] = JX
    A[n_y:, :n_y] = JX.T
    rhs = np.concatenate([rhs_top, np.zeros(p)])
    try:
        sol = sla.solve(A, rhs, assume_a="sym")
    except (sla.LinAlgError, ValueError) as exc:
        raise FactorizationError(f"saddle matrix is singular (J Q J^T + R block): {exc}") from exc
    resid = np.linalg.norm(A @ sol - rhs) / max(np.linalg.norm(rhs), np.finfo(float).tiny)
    xi, beta = sol[:n_y], sol[n_y:]
    drift = np.linalg.norm(JX.T @ xi) / max(np.linalg.norm(JX) * np.linalg.norm(xi),
                                             np.finfo(float).tiny)
    return xi, beta, QJt, resid, drift


def gauss_newton_step(problem: InversionProblem, s, beta, h=None, J=None, f_old=None,
                      damping=True, max_halvings=5) -> GNIterate:
    """One (optionally damped) quasi-linear step from ``s``.

    ``h`` and ``J`` at ``s`` are computed when not given. With damping the
    step length is halved up to ``max_halvings`` times until the objective
    does not increase; if it still increases the iterate is returned with
    ``accepted=False`` and the old point.
    """
    s = np.asarray(s, dtype=float)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if h is None or J is None:
        h, J = problem.forward(s)
    if f_old is None:
        f_old = objective(problem, s, beta, h)
    xi, beta_new, QJt, resid, drift = solve_saddle(J, problem.Q, problem.R, problem.X,
                                                   problem.y - h + J @ s)
    s_full = problem.X @ beta_new + QJt @ xi
    alpha = 1.0
    for _ in range(max_halvings + 1):
        s_try = s + alpha * (s_full - s)
        b_try = beta + alpha * (beta_new - beta)
        h_try = problem.forward.predict(s_try)
        misfit, prior = objective_terms(problem, s_try, b_try, h_try)
        f_try = misfit + prior
        if not damping or (math.isfinite(f_try) and f_try <= f_old):
            return GNIterate(s_try, b_try, xi, h_try, f_try, misfit, prior, alpha,
                             float(np.linalg.norm(s_try - s)), resid, drift, True)
        log.debug("GN step alpha=%g increased objective %.6e -> %.6e", alpha, f_old, f_try)
        alpha *= 0.5
    misfit, prior = objective_terms(problem, s, beta, h)
    return GNIterate(s, beta, xi, h, f_old, misfit, prior, 0.0, 0.0, resid, drift, False)


@dataclass
class InversionResult:
    s: np.ndarray
    beta: np.ndarray
    history: list
    converged: bool
    reason: str
    wall_seconds: float = 0.0

    @property
    def objectives(self) -> np.ndarray:
        return np.array([it["objective"] for it in self.history])


def invert(problem: InversionProblem, s0, max_gn: int = 15, rtol: float = 1e-3,
           damping: bool = True) -> InversionResult:
    """Iterate Gauss-Newton steps from ``s0``.

    Stops when the relative step ``|s+ - s| / max(|s|, |s+|)`` or the relative objective
    decrease falls to ``rtol``, when a damped step fails to decrease the
    objective, or after ``max_gn`` steps. ``history[0]`` describes ``s0``.
    """
    if max_gn < 1:
        raise InvalidArgumentError("max_gn must be at least 1")
    t_start = time.perf_counter()
    s = np.asarray(s0, dtype=float).copy()
    beta = problem.drift_fit(s)
    h, J = problem.forward(s)
    misfit, prior = objective_terms(problem, s, beta, h)
    f = misfit + prior
    history = [dict(iteration=0, objective=f, misfit=misfit, prior=prior, alpha=float("nan"),
                    step_norm=0.0, saddle_residual=float("nan"), drift_residual=float("nan"))]
    reason, converged = "max_gn reached", False
    for k in range(1, max_gn + 1):
        it = gauss_newton_step(problem, s, beta, h, J, f, damping=damping)
        history.append(dict(iteration=k, objective=it.objective, misfit=it.misfit,
                            prior=it.prior, alpha=it.alpha, step_norm=it.step_norm,
                            saddle_residual=it.saddle_residual,
                            drift_residual=it.drift_residual))
        log.info("GN %d: objective %.6e alpha %g step %.3e", k, it.objective, it.alpha,
                 it.step_norm)
        if not it.accepted:
            reason = "no decrease after damping"
            break
        rel_step = it.step_norm / max(np.linalg.norm(s), np.linalg.norm(it.s),
                                      np.finfo(float).tiny)
        rel_dec = (f - it.objective) / max(abs(f), np.finfo(float).tiny)
        s, beta, f = it.s, it.beta, it.objective
        if rel_step <= rtol or rel_dec <= rtol:
            reason, converged = ("step" if rel_step <= rtol else "objective"), True
            break
        if k < max_gn:
            h, J = problem.forward(s)
    return InversionResult(s, beta, history, converged, reason, time.perf_counter() - t_start)


def relative_l2(estimate, truth, mask=None) -> float:
    """``|estimate - truth| / |truth|`` over the masked entries."""
    estimate, truth = np.asarray(estimate), np.asarray(truth)
    if mask is not None:
        estimate, truth = estimate[mask], truth[mask]
    return float(np.linalg.norm(estimate - truth) / np.linalg.norm(truth))


def synthetic_measurements(mesh: Mesh2D, log_kappa, experiment: Experiment, storativity=1e-5,
                           noise_percent=2.0, seed=0, dt=1.0):
    """Heads by Crank-Nicolson at the experiment's times with multiplicative noise.

    Returns ``(noisy, clean)`` in Jacobian row order. Using a time stepper
    here rather than the Laplace solver adds model error on purpose.
    """
    ops = assemble(mesh, np.exp(log_kappa), storativity)
    E = np.column_stack([ops.restrict(point_source(mesh, x)) for x in experiment.receivers])
    clean = np.empty(experiment.n_measurements)
    t_end = float(np.max(experiment.times))
    for i_s, xs in enumerate(experiment.sources):
        b = ops.restrict(point_source(mesh, xs))
        traj = crank_nicolson(ops, b, experiment.rates[i_s], None, dt, t_end, startup_steps=1)
        for it, t in enumerate(experiment.times):
            n = int(round(t / traj.dt))
            if abs(traj.times[n] - t) > 1e-9 * t_end:
                raise InvalidArgumentError(f"time {t:g}s is not a multiple of dt={traj.dt:g}")
            heads = E.T @ traj.states[n]
            for i_r in range(E.shape[1]):
                clean[experiment.row_index(i_s, i_r, it)] = heads[i_r]
    rng = np.random.default_rng(seed)
    noisy = clean * (1.0 + 0.01 * noise_percent * rng.standard_normal(clean.size))
    return noisy, clean
