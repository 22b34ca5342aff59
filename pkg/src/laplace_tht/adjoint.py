"""Measurement Jacobian by the Laplace-domain adjoint method.

A measurement is the head at a receiver at one time, ``I = e_m^T phi(t)``.
With ``(K + zM) psi_hat = -e_m`` and the pencil symmetric, differentiating
``(K + zM) phi_hat = q_hat b`` gives per element

    dI/ds_K[e] = 2 Re sum_k w_k kappa_e phi_hat_k^T K_e psi_hat_k
    dI/ds_S[e] = 2 Re sum_k w_k S_e (z_k phi_hat_k - phi0)^T M_e psi_hat_k

where ``K_e``, ``M_e`` are the unit-coefficient element matrices and the
fields are taken at the half-contour shifts of the time's Talbot rule.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConvergenceError, InvalidArgumentError
from .fem import AssembledOperators, local_mass, local_stiffness, point_source
from .forward import _check, _solve_family
from .shifted import FactorCache
from .talbot import TalbotContour, build_contour, inverse_laplace_sum, qhat_step


def forward_fields(ops: AssembledOperators, source, q0, contour: TalbotContour,
                   solver="flexible", tol=1e-10, variant="gmres", factors=None,
                   phi0=None) -> np.ndarray:
    """``phi_hat(z_k)`` for every half-contour shift, shape ``(n_free, n_half)``."""
    shifts = contour.nodes
    res = _check(_solve_family(ops, np.asarray(source, dtype=float), shifts, solver, tol,
                               variant, None, factors), "forward fields")
    F = res.solutions * qhat_step(q0, shifts)[None, :]
    if phi0 is not None and np.any(phi0):
        res0 = _check(_solve_family(ops, ops.M @ phi0, shifts, solver, tol, variant, None,
                                    factors), "forward fields (initial head)")
        F = F + res0.solutions
    return F


def solve_adjoint_fields(ops: AssembledOperators, receiver, contour: TalbotContour,
                         solver="flexible", tol=1e-10, variant="gmres",
                         factors=None) -> np.ndarray:
    """Solve ``(K + z_k M) psi_k = -e_m`` for every half-contour shift.

    The pencil is complex symmetric, so the adjoint systems use the forward
    matrices and share the same factorization cache. Returns an array of
    shape ``(n_free, n_half)``.
    """
    e = np.asarray(receiver, dtype=float).ravel()
    if e.size != ops.n:
        raise InvalidArgumentError(f"receiver vector must have {ops.n} entries")
    if not np.any(e):
        return np.zeros((ops.n, contour.n_half), dtype=complex)
    res = _check(_solve_family(ops, -e, contour.nodes, solver, tol, variant, None, factors),
                 "adjoint fields")
    return res.solutions


def sensitivity_row(ops: AssembledOperators, phi_hat, psi_hat, contour: TalbotContour,
                    include_z_factor: bool = True, include_storativity: bool = False,
                    phi0=None, impl=None) -> np.ndarray:
    """Per-element derivative of one measurement.

    Parameters
    ----------
    phi_hat, psi_hat : ndarray, shape (n_free, n_half)
        Forward and adjoint fields on the same contour.
    include_z_factor : bool
        Multiply the storativity term by ``z_k``. The weak form requires it;
        the flag exists to test the alternative.
    include_storativity : bool
        Append the log-storativity block after the log-conductivity block.

    Returns
    -------
    ndarray
        Length ``n_elements``, or ``2 * n_elements`` with storativity.
    """
    phi_hat = np.asarray(phi_hat)
    psi_hat = np.asarray(psi_hat)
    p = contour.n_half
    if phi_hat.shape != (ops.n, p) or psi_hat.shape != (ops.n, p):
        raise InvalidArgumentError(
            f"fields must have shape {(ops.n, p)}, got {phi_hat.shape} and {psi_hat.shape}"
        )
    mesh = ops.mesh
    phi_full = ops.extend(phi_hat)
    psi_full = ops.extend(psi_hat)
    w = np.asarray(contour.weights)
    row_k = 2.0 * np.real(kernels.element_bilinear(
        mesh.elements, local_stiffness(mesh), phi_full, psi_full, w, impl=impl))
    row_k *= ops.kappa
    if not include_storativity:
        return row_k
    z = np.asarray(contour.nodes)
    phi_s = phi_full * z[None, :] if include_z_factor else phi_full.copy()
    if phi0 is not None and np.any(phi0):
        phi_s = phi_s - ops.extend(np.asarray(phi0, dtype=float))[:, None]
    row_s = 2.0 * np.real(kernels.element_bilinear(
        mesh.elements, local_mass(mesh), phi_s, psi_full, w, impl=impl))
    row_s *= ops.storativity
    return np.concatenate([row_k, row_s])


@dataclass
class Experiment:
    """Pumping-test geometry: every source is observed at every receiver and time.

    ``times`` are in seconds. ``rates`` are pumping rates [m^3/s], one per source.
    """

    sources: np.ndarray
    rates: np.ndarray
    receivers: np.ndarray
    times: np.ndarray
    n_quad: int = 40
    contour: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sources = np.atleast_2d(np.asarray(self.sources, dtype=float))
        self.receivers = np.atleast_2d(np.asarray(self.receivers, dtype=float))
        self.rates = np.broadcast_to(np.asarray(self.rates, dtype=float),
                                     (self.sources.shape[0],)).copy()
        self.times = np.atleast_1d(np.asarray(self.times, dtype=float))
        if self.sources.shape[0] == 0 or self.receivers.shape[0] == 0 or self.times.size == 0:
            raise InvalidArgumentError("experiment needs at least one source, receiver and time")
        if self.sources.shape[1] != 2 or self.receivers.shape[1] != 2:
            raise InvalidArgumentError("source and receiver locations must be (x, y) pairs")
        if np.any(self.times <= 0):
            raise InvalidArgumentError("times must be positive")

    @property
    def n_measurements(self) -> int:
        return self.sources.shape[0] * self.receivers.shape[0] * self.times.size

    def row_index(self, i_source, i_receiver, i_time) -> int:
        nr, nt = self.receivers.shape[0], self.times.size
        return (i_source * nr + i_receiver) * nt + i_time

    def rows(self):
        """``(source, receiver, time)`` index triples in row order."""
        for s in range(self.sources.shape[0]):
            for r in range(self.receivers.shape[0]):
                for t in range(self.times.size):
                    yield s, r, t


@dataclass
class JacobianResult:
    J: np.ndarray
    predictions: np.ndarray
    wall_seconds: float = 0.0


def predict(ops: AssembledOperators, experiment: Experiment, solver="flexible", tol=1e-10,
            variant="gmres", factors=None) -> np.ndarray:
    """Measurements ``h(s)`` only, in Jacobian row order."""
    factors = factors or FactorCache(ops.K, ops.M)
    E = np.column_stack([ops.restrict(point_source(ops.mesh, x)) for x in experiment.receivers])
    out = np.empty(experiment.n_measurements)
    for it, t in enumerate(experiment.times):
        contour = build_contour(experiment.n_quad, t, **experiment.contour)
        for i_s, xs in enumerate(experiment.sources):
            b = ops.restrict(point_source(ops.mesh, xs))
            F = forward_fields(ops, b, experiment.rates[i_s], contour, solver, tol, variant,
                               factors)
            h = inverse_laplace_sum(contour, (E.T @ F).T)
            for i_r in range(E.shape[1]):
                out[experiment.row_index(i_s, i_r, it)] = h[i_r]
    return out


def assemble_jacobian(ops: AssembledOperators, experiment: Experiment, solver="flexible",
                      tol=1e-10, variant="gmres", include_storativity=False,
                      include_z_factor=True, factors=None) -> JacobianResult:
    """Dense Jacobian of all measurements with respect to the log-parameters.

    Forward solves are shared per (source, time) and adjoint solves per
    (receiver, time); every row is then an independent element sum.
    Rows are ordered source-major, then receiver, then time.
    """
    t_start = time.perf_counter()
    factors = factors or FactorCache(ops.K, ops.M)
    n_s = ops.mesh.n_elements * (2 if include_storativity else 1)
    J = np.empty((experiment.n_measurements, n_s))
    h = np.empty(experiment.n_measurements)
    E = [ops.restrict(point_source(ops.mesh, x)) for x in experiment.receivers]
    for it, t in enumerate(experiment.times):
        contour = build_contour(experiment.n_quad, t, **experiment.contour)
        try:
            fwd = [forward_fields(ops, ops.restrict(point_source(ops.mesh, xs)),
                                  experiment.rates[i], contour, solver, tol, variant, factors)
                   for i, xs in enumerate(experiment.sources)]
            adj = [solve_adjoint_fields(ops, e, contour, solver, tol, variant, factors)
                   for e in E]
        except ConvergenceError as exc:
            raise ConvergenceError(f"time {t:g}s: {exc}", exc.result) from exc
        for i_s, F in enumerate(fwd):
            for i_r, Psi in enumerate(adj):
                row = experiment.row_index(i_s, i_r, it)
                J[row] = sensitivity_row(ops, F, Psi, contour, include_z_factor,
                                         include_storativity)
                h[row] = inverse_laplace_sum(contour, E[i_r] @ F)
    return JacobianResult(J, h, time.perf_counter() - t_start)


def finite_difference_jacobian(mesh, log_kappa, log_storativity, experiment: Experiment,
                               step=1e-5, elements=None, storativity=False,
                               factors_solver="direct") -> np.ndarray:
    """Central differences of :func:`predict` in the log-parameters.

    Slow reference; ``elements`` restricts the columns computed.
    """
    from .fem import assemble

    log_kappa = np.asarray(log_kappa, dtype=float)
    log_s = np.broadcast_to(np.asarray(log_storativity, dtype=float), log_kappa.shape).copy()
    cols = np.arange(log_kappa.size) if elements is None else np.asarray(elements)
    out = np.empty((experiment.n_measurements, cols.size))
    for j, e in enumerate(cols):
        vals = []
        for sgn in (1.0, -1.0):
            lk, ls = log_kappa.copy(), log_s.copy()
            if storativity:
                ls[e] += sgn * step
            else:
                lk[e] += sgn * step
            ops = assemble(mesh, np.exp(lk), np.exp(ls))
            vals.append(predict(ops, experiment, solver=factors_solver))
        out[:, j] = (vals[0] - vals[1]) / (2.0 * step)
    return out
