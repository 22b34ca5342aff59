"""Head fields at target times by contour quadrature, plus a Crank-Nicolson reference.

In the Laplace domain the semi-discrete problem ``M phi' + K phi = q(t) b``
becomes ``(K + zM) phi_hat = q_hat(z) b + M phi0``. Each target time needs
the half-contour shifts of its own Talbot rule; all of them are solved
together by one shifted Krylov run.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, FactorizationError, InvalidArgumentError
from .fem import AssembledOperators, point_source
from .shifted import (
    FactorCache,
    select_preconditioner_shifts,
    solve_shifted_direct,
    solve_shifted_flexible,
    solve_shifted_single,
)
from .talbot import build_contour, inverse_laplace_sum, qhat_step

log = logging.getLogger(__name__)

SOLVERS = ("single", "flexible", "direct")
IMAG_TOL = 1e-8


@dataclass
class ForwardProblem:
    """One pumping test on a fixed pencil.

    Parameters
    ----------
    ops : AssembledOperators
    source : ndarray
        Unit point-source vector on the free degrees of freedom.
    q0 : float
        Pumping rate [m^3/s], switched on at t = 0.
    times : array_like
        Target times in seconds, strictly positive and increasing.
    phi0 : ndarray, optional
        Initial head on the free degrees of freedom; ``None`` means rest.
    n_quad : int
        Total number of contour nodes ``N_z``.
    contour : dict
        Overrides for ``sigma``, ``mu``, ``nu``, ``alpha``.
    rate_transform : callable, optional
        ``q_hat(z)``; defaults to the step ``q0 / z``.
    """

    ops: AssembledOperators
    source: np.ndarray
    q0: float
    times: np.ndarray
    phi0: np.ndarray | None = None
    n_quad: int = 40
    contour: dict = field(default_factory=dict)
    rate_transform: object = None

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=float).ravel()
        if self.source.size != self.ops.n:
            raise InvalidArgumentError(
                f"source has {self.source.size} entries, expected {self.ops.n} free dofs"
            )
        self.times = np.atleast_1d(np.asarray(self.times, dtype=float))
        if self.times.ndim != 1 or self.times.size == 0:
            raise InvalidArgumentError("times must be a nonempty 1-d sequence")
        if np.any(self.times <= 0) or np.any(np.diff(self.times) < 0):
            raise InvalidArgumentError("times must be strictly positive and sorted")
        if self.phi0 is not None:
            self.phi0 = np.asarray(self.phi0, dtype=float).ravel()
            if self.phi0.size != self.ops.n:
                raise InvalidArgumentError("phi0 must live on the free dofs")
        if not np.isfinite(self.q0):
            raise InvalidArgumentError("q0 must be finite")

    @classmethod
    def from_points(cls, ops, x_source, q0, times, **kw):
        """Build a problem from a source location instead of a vector."""
        b = ops.restrict(point_source(ops.mesh, x_source))
        return cls(ops, b, q0, times, **kw)

    def qhat(self, z):
        if self.rate_transform is None:
            return qhat_step(self.q0, z)
        return np.asarray(self.rate_transform(z), dtype=complex)

    def build_contour(self, t):
        return build_contour(self.n_quad, t, **self.contour)

    @property
    def has_initial_head(self) -> bool:
        return self.phi0 is not None and bool(np.any(self.phi0))


@dataclass
class HeadSolution:
    """Heads at each requested time, free dofs only, with solver diagnostics."""

    times: np.ndarray
    heads: np.ndarray  # (n_times, n_free)
    ops: AssembledOperators = field(repr=False)
    solver: str = "flexible"
    iterations: list = field(default_factory=list)
    results: list = field(default_factory=list, repr=False)
    imag_residue: np.ndarray | None = None
    wall_seconds: float = 0.0

    def full_heads(self) -> np.ndarray:
        """Heads on every mesh node (zero on the Dirichlet boundary)."""
        return self.ops.extend(self.heads.T).T

    def at(self, x) -> np.ndarray:
        """Head time series at a point, by P1 interpolation."""
        e = self.ops.restrict(point_source(self.ops.mesh, x))
        return self.heads @ e


def _solve_family(ops, rhs, shifts, solver, tol, variant, maxit, factors, schedule=None):
    if solver == "single":
        return solve_shifted_single(ops.K, ops.M, rhs, shifts, tol=tol, maxit=maxit,
                                    variant=variant, factors=factors)
    if solver == "flexible":
        return solve_shifted_flexible(ops.K, ops.M, rhs, shifts, schedule=schedule, tol=tol,
                                      maxit=maxit, variant=variant, factors=factors)
    if solver == "direct":
        return solve_shifted_direct(ops.K, ops.M, rhs, shifts, factors=factors)
    raise InvalidArgumentError(f"solver must be one of {SOLVERS}, got {solver!r}")


def _check(result, what):
    if not result.all_converged:
        raise ConvergenceError(
            f"{what}: shifts {result.unconverged} did not reach tol {result.tol:g} "
            f"after {result.iterations} iterations",
            result,
        )
    return result


def _symmetry_residue(problem, contour, factors):
    """Imaginary part of the full-contour sum, with the lower half solved directly."""
    z_full, w_full = contour.full()
    lower = z_full[: contour.n_quad // 2]
    X = solve_shifted_direct(problem.ops.K, problem.ops.M, problem.source, lower,
                             factors=factors).solutions
    F_low = X * problem.qhat(lower)[None, :]
    if problem.has_initial_head:
        X0 = solve_shifted_direct(problem.ops.K, problem.ops.M, problem.ops.M @ problem.phi0,
                                  lower, factors=factors).solutions
        F_low = F_low + X0
    return F_low, w_full[: contour.n_quad // 2]


def _laplace_transforms(problem, shifts, solver, tol, variant, maxit, factors, schedule=None):
    """Columns ``F(z_k)`` for every shift, plus the solver results used."""
    res = _check(_solve_family(problem.ops, problem.source, shifts, solver, tol, variant,
                               maxit, factors, schedule), "source family")
    F = res.solutions * problem.qhat(shifts)[None, :]
    results = [res]
    if problem.has_initial_head:
        res0 = _check(_solve_family(problem.ops, problem.ops.M @ problem.phi0, shifts,
                                    solver, tol, variant, maxit, factors, schedule),
                      "initial-head family")
        F = F + res0.solutions
        results.append(res0)
    return F, results


def solve_forward(problem: ForwardProblem, solver: str = "flexible", tol: float = 1e-10,
                  variant: str = "gmres", maxit=None, factors: FactorCache | None = None,
                  check_symmetry: bool = False) -> HeadSolution:
    """Heads at each time of ``problem``, one shifted solve per time.

    Parameters
    ----------
    solver : {"single", "flexible", "direct"}
    check_symmetry : bool
        Also solve the lower half of the contour directly and verify that
        the imaginary part of the full sum is below ``1e-8`` relative.
        Without it only the cheap precondition (real pencil, real source,
        ``q_hat(conj z) = conj q_hat(z)``) is checked.
    """
    if solver not in SOLVERS:
        raise InvalidArgumentError(f"solver must be one of {SOLVERS}, got {solver!r}")
    t_start = time.perf_counter()
    factors = factors or FactorCache(problem.ops.K, problem.ops.M)
    heads = np.empty((problem.times.size, problem.ops.n))
    iterations, results, residues = [], [], []
    for i, t in enumerate(problem.times):
        contour = problem.build_contour(t)
        _assert_real_symmetric(problem, contour.nodes)
        F, res = _laplace_transforms(problem, contour.nodes, solver, tol, variant, maxit,
                                     factors)
        heads[i] = inverse_laplace_sum(contour, F.T)
        iterations.append(max(r.iterations for r in res))
        results.extend(res)
        if check_symmetry:
            F_low, w_low = _symmetry_residue(problem, contour, factors)
            total = w_low @ F_low.T + contour.weights @ F.T
            scale = max(np.linalg.norm(heads[i]), np.finfo(float).tiny)
            residues.append(np.linalg.norm(total.imag) / scale)
            if residues[-1] > IMAG_TOL:
                raise ConvergenceError(
                    f"imaginary residue {residues[-1]:.3e} at t={t:g}s exceeds {IMAG_TOL:g}"
                )
    return HeadSolution(problem.times.copy(), heads, problem.ops, solver, iterations, results,
                        np.array(residues) if check_symmetry else None,
                        time.perf_counter() - t_start)


def _assert_real_symmetric(problem, shifts):
    # half-contour symmetry needs F(conj z) = conj F(z)
    q = problem.qhat(shifts)
    if not np.allclose(problem.qhat(np.conj(shifts)), np.conj(q), rtol=1e-12, atol=0):
        raise InvalidArgumentError("q_hat must satisfy q_hat(conj z) = conj(q_hat(z))")
    for A in (problem.ops.K, problem.ops.M):
        if np.iscomplexobj(A.data):
            raise InvalidArgumentError("K and M must be real")


def solve_forward_batch(problem: ForwardProblem, tol: float = 1e-10, variant: str = "gmres",
                        maxit=None, factors: FactorCache | None = None,
                        block=(3, 2)) -> HeadSolution:
    """Heads at all times from one flexible solve over the pooled shifts.

    The two preconditioners are the pooled shifts of smallest and largest
    real part; each time then applies its own weights to its own columns.
    """
    t_start = time.perf_counter()
    factors = factors or FactorCache(problem.ops.K, problem.ops.M)
    contours = [problem.build_contour(t) for t in problem.times]
    shifts = np.concatenate([c.nodes for c in contours])
    _assert_real_symmetric(problem, shifts)
    schedule = select_preconditioner_shifts(shifts, block=block)[2]
    F, res = _laplace_transforms(problem, shifts, "flexible", tol, variant, maxit, factors,
                                 schedule)
    heads = np.empty((problem.times.size, problem.ops.n))
    start = 0
    for i, c in enumerate(contours):
        heads[i] = inverse_laplace_sum(c, F[:, start:start + c.n_half].T)
        start += c.n_half
    its = max(r.iterations for r in res)
    return HeadSolution(problem.times.copy(), heads, problem.ops, "batch",
                        [its] * problem.times.size, res, None,
                        time.perf_counter() - t_start)


@dataclass
class Trajectory:
    """Crank-Nicolson states; ``states[i]`` is the head at ``times[i]``."""

    times: np.ndarray
    states: np.ndarray
    dt: float
    wall_seconds: float = 0.0

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _rate_average(q, t0, t1):
    if callable(q):
        # Simpson's rule; exact for the piecewise-polynomial rates used here
        return (q(t0) + 4.0 * q(0.5 * (t0 + t1)) + q(t1)) / 6.0
    return float(q)


def crank_nicolson(ops: AssembledOperators, source, q, phi0=None, dt: float = 1.0,
                   t_end: float = 1.0, keep: str = "all", startup_steps: int = 0) -> Trajectory:
    """Crank-Nicolson for ``M phi' + K phi = q(t) b``.

    Each step solves ``(M + dt/2 K) phi+ = (M - dt/2 K) phi + dt qbar b`` with
    ``qbar`` the interval average of ``q``. ``dt`` is shrunk slightly if
    needed so that ``t_end`` is hit exactly.

    Parameters
    ----------
    q : float or callable
        Pumping rate, constant for t > 0 or a function of time.
    keep : {"all", "final"}
        Store every step or only the final state.
    startup_steps : int
        Number of leading steps replaced by two backward-Euler half steps
        each (Rannacher smoothing). ``0`` gives plain Crank-Nicolson.
    """
    if not dt > 0 or not t_end > 0:
        raise InvalidArgumentError("dt and t_end must be positive")
    if keep not in ("all", "final"):
        raise InvalidArgumentError("keep must be 'all' or 'final'")
    t_start = time.perf_counter()
    n_steps = max(1, math.ceil(t_end / dt - 1e-9))
    dt = t_end / n_steps
    b = np.asarray(source, dtype=float).ravel()
    phi = np.zeros(ops.n) if phi0 is None else np.asarray(phi0, dtype=float).copy()
    K, M = ops.K, ops.M
    try:
        # backward-Euler half steps (dt/2) share the matrix M + dt/2 K
        lu = spla.splu((M + 0.5 * dt * K).tocsc())
    except RuntimeError as exc:
        raise FactorizationError(f"Crank-Nicolson matrix is singular: {exc}") from exc
    B = (M - 0.5 * dt * K).tocsr()
    times = np.linspace(0.0, t_end, n_steps + 1)
    states = np.empty((n_steps + 1 if keep == "all" else 1, ops.n))
    if keep == "all":
        states[0] = phi
    for n in range(n_steps):
        t0, t1 = times[n], times[n + 1]
        if n < startup_steps:
            for a, c in ((t0, 0.5 * (t0 + t1)), (0.5 * (t0 + t1), t1)):
                phi = lu.solve(M @ phi + 0.5 * dt * _rate_average(q, a, c) * b)
        else:
            phi = lu.solve(B @ phi + dt * _rate_average(q, t0, t1) * b)
        if keep == "all":
            states[n + 1] = phi
    if keep == "final":
        states[0] = phi
        times = times[-1:]
    return Trajectory(times, states, dt, time.perf_counter() - t_start)


@dataclass
class RichardsonResult:
    head: np.ndarray
    dt: float
    error_estimate: float
    levels: list


def crank_nicolson_richardson(ops, source, q, t_end, phi0=None, rtol: float = 1e-4,
                              dt0: float | None = None, max_levels: int = 10,
                              startup_steps: int = 0) -> RichardsonResult:
    """Crank-Nicolson at ``t_end`` with ``dt`` halved until converged.

    The error of the finer solution is estimated as ``|phi_dt - phi_dt/2| / 3``
    (second order); halving stops once that falls below ``rtol`` relative.
    The returned head is the Richardson extrapolation of the last pair.
    """
    dt = dt0 if dt0 is not None else t_end / 16.0
    prev = crank_nicolson(ops, source, q, phi0, dt, t_end, keep="final",
                          startup_steps=startup_steps).final
    levels = []
    for _ in range(max_levels):
        dt *= 0.5
        # a fixed number of smoothing steps keeps the scheme second order
        cur = crank_nicolson(ops, source, q, phi0, dt, t_end, keep="final",
                             startup_steps=startup_steps).final
        scale = max(np.linalg.norm(cur), np.finfo(float).tiny)
        est = np.linalg.norm(cur - prev) / 3.0 / scale
        levels.append((dt, est))
        log.debug("CN Richardson dt=%g est=%.3e", dt, est)
        if est <= rtol:
            return RichardsonResult((4.0 * cur - prev) / 3.0, dt, est, levels)
        prev = cur
    raise ConvergenceError(f"Crank-Nicolson did not reach rtol {rtol:g}; last estimate {est:.3e}")
