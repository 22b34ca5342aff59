"""Krylov solvers for families of shifted systems ``(K + z_k M) x_k = b``.

One Arnoldi basis serves every shift. With a single shift-and-invert
preconditioner ``(K + tau M)^{-1}`` the basis is a Krylov space of
``M (K + tau M)^{-1}``; the flexible variant changes ``tau`` from one
iteration to the next and the preconditioned vectors ``U`` span a rational
Krylov space. In both cases

    (K + z M) U_m = V_{m+1} ([I; 0] + Hbar_m (z I - T_m)),

with ``T_m = diag(tau_1, ..., tau_m)``, so the per-shift work reduces to a
small Hessenberg problem. Those are tracked incrementally with one set of
Givens rotations per shift, which yields the GMRES residual norm and the
FOM residual norm (``|eta_k|``) at O(m) cost per iteration.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import kernels
from .errors import FactorizationError, InvalidArgumentError

log = logging.getLogger(__name__)

_REORTH = 1.0 / math.sqrt(2.0)
_BREAKDOWN = 1e-14


class FactorCache:
    """Sparse LU factorizations of ``K + tau M`` keyed by ``tau``.

    Factorizations are computed on first use and reused afterwards, so one
    cache can serve a forward solve and every adjoint solve that shares
    the same preconditioner shifts.
    """

    def __init__(self, K, M):
        self.K = sp.csc_matrix(K)
        self.M = sp.csc_matrix(M)
        self._lu = {}

    def __len__(self):
        return len(self._lu)

    def __contains__(self, tau):
        return complex(tau) in self._lu

    def get(self, tau):
        key = complex(tau)
        lu = self._lu.get(key)
        if lu is None:
            A = (self.K + key * self.M).astype(complex).tocsc()
            try:
                lu = splu(A)
            except RuntimeError as exc:
                raise FactorizationError(f"factorization of K + ({key})M failed: {exc}") from exc
            self._lu[key] = lu
        return lu

    def solve(self, tau, rhs):
        return self.get(tau).solve(np.asarray(rhs, dtype=complex))


@dataclass(frozen=True)
class PreconditionerSchedule:
    """Cyclic assignment of preconditioner shifts to iterations.

    Iteration ``j`` (0-based) uses ``tau_values[pattern[j % len(pattern)]]``.
    """

    tau_values: tuple
    pattern: tuple

    def __post_init__(self):
        if not self.tau_values or not self.pattern:
            raise InvalidArgumentError("schedule needs at least one shift")
        if any(not 0 <= i < len(self.tau_values) for i in self.pattern):
            raise InvalidArgumentError("pattern index out of range")

    def __call__(self, j: int) -> complex:
        return self.tau_values[self.pattern[j % len(self.pattern)]]

    def sequence(self, m: int) -> np.ndarray:
        return np.array([self(j) for j in range(m)], dtype=complex)

    @classmethod
    def single(cls, tau):
        return cls((complex(tau),), (0,))


def select_preconditioner_shifts(shifts, block=(3, 2)):
    """Pick the extreme-real-part shifts and the repeating schedule.

    Returns ``(tau1, tau2, schedule)`` where ``tau1`` has the smallest real
    part and ``tau2`` the largest; ties go to the smaller imaginary part,
    then the lower index. The schedule uses ``tau1`` for ``block[0]``
    iterations, then ``tau2`` for ``block[1]``, repeated.
    """
    shifts = np.atleast_1d(np.asarray(shifts, dtype=complex))
    if shifts.size == 0:
        raise InvalidArgumentError("need at least one shift")
    idx = np.arange(shifts.size)
    i1 = np.lexsort((idx, shifts.imag, shifts.real))[0]
    i2 = np.lexsort((idx, shifts.imag, -shifts.real))[0]
    tau1 = complex(shifts[i1])
    tau2 = complex(shifts[i2])
    if tau1 == tau2:
        return tau1, tau2, PreconditionerSchedule.single(tau1)
    pattern = (0,) * block[0] + (1,) * block[1]
    return tau1, tau2, PreconditionerSchedule((tau1, tau2), pattern)


@dataclass
class FlexibleBasisState:
    """Arnoldi data after ``m`` steps.

    ``U`` is ``None`` for the single-preconditioner method, where
    ``U_m = (K + tau M)^{-1} V_m`` is implicit.
    """

    V: np.ndarray
    U: np.ndarray | None
    Hbar: np.ndarray
    taus: np.ndarray
    beta: float

    @property
    def m(self) -> int:
        return self.taus.size

    def hbar_shifted(self, z) -> np.ndarray:
        """``[I; 0] + Hbar_m (z I - T_m)``, shape ``(m+1, m)``."""
        m = self.m
        Hz = self.Hbar[: m + 1, :m] * (z - self.taus)[None, :]
        Hz[np.arange(m), np.arange(m)] += 1.0
        return Hz

    def fom_coefficients(self, z) -> np.ndarray:
        Hz = self.hbar_shifted(z)
        rhs = np.zeros(self.m, dtype=complex)
        rhs[0] = self.beta
        return sla.solve(Hz[: self.m], rhs)

    def gmres_coefficients(self, z) -> np.ndarray:
        Hz = self.hbar_shifted(z)
        rhs = np.zeros(self.m + 1, dtype=complex)
        rhs[0] = self.beta
        return sla.lstsq(Hz, rhs)[0]

    def preconditioned_basis(self, factors: FactorCache | None = None) -> np.ndarray:
        if self.U is not None:
            return self.U
        if factors is None:
            raise InvalidArgumentError("single-preconditioner state needs the factor cache")
        return np.column_stack(
            [factors.solve(self.taus[j], self.V[:, j]) for j in range(self.m)]
        )

    def arnoldi_residual(self, K, M, z, factors: FactorCache | None = None) -> float:
        """Frobenius norm of ``(K + zM) U_m - V_{m+1} Hbar_m(z; T_m)``."""
        U = self.preconditioned_basis(factors)
        lhs = K @ U + z * (M @ U)
        return float(np.linalg.norm(lhs - self.V[:, : self.m + 1] @ self.hbar_shifted(z)))


def residual_estimate(state: FlexibleBasisState, z, y) -> float:
    """``|h_{m+1,m} (z - tau_m) y_m|``, the FOM residual norm for coefficients ``y``."""
    m = state.m
    if m < 1:
        raise InvalidArgumentError("need at least one Arnoldi step")
    return float(abs(state.Hbar[m, m - 1] * (z - state.taus[m - 1]) * y[m - 1]))


@dataclass
class ShiftedSolveResult:
    shifts: np.ndarray
    solutions: np.ndarray
    converged: np.ndarray
    converged_at: np.ndarray
    estimates: np.ndarray
    true_residuals: np.ndarray
    history: np.ndarray
    iterations: int
    taus: np.ndarray
    variant: str
    method: str
    beta: float
    tol: float
    wall_seconds: float
    stagnated: np.ndarray = field(default=None)
    state: FlexibleBasisState | None = field(default=None, repr=False)

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))

    @property
    def unconverged(self) -> list:
        return [int(k) for k in np.flatnonzero(~self.converged)]

    @property
    def n_preconditioners(self) -> int:
        return len(set(complex(t) for t in self.taus))


def _as_schedule(schedule):
    if isinstance(schedule, PreconditionerSchedule):
        return schedule
    taus = tuple(complex(t) for t in np.atleast_1d(schedule))
    uniq = []
    for t in taus:
        if t not in uniq:
            uniq.append(t)
    return PreconditionerSchedule(tuple(uniq), tuple(uniq.index(t) for t in taus))


def _solve_family(K, M, b, shifts, schedule, tol, maxit, variant, factors,
                  store_u, keep_basis, method):
    t_start = time.perf_counter()
    if variant not in ("fom", "gmres"):
        raise InvalidArgumentError(f"variant must be 'fom' or 'gmres', got {variant!r}")
    b = np.asarray(b, dtype=complex).ravel()
    n = b.size
    shifts = np.atleast_1d(np.asarray(shifts, dtype=complex)).ravel()
    p = shifts.size
    if p == 0:
        raise InvalidArgumentError("need at least one shift")
    if factors is None:
        factors = FactorCache(K, M)
    if maxit is None:
        maxit = 10 * p
    maxit = max(1, min(int(maxit), n))

    beta = float(np.linalg.norm(b))
    solutions = np.zeros((n, p), dtype=complex)
    converged = np.zeros(p, dtype=bool)
    converged_at = np.full(p, -1)
    estimates = np.full(p, np.inf)
    true_res = np.full(p, np.nan)
    stagnated = np.zeros(p, dtype=bool)
    if beta == 0.0:
        converged[:] = True
        converged_at[:] = 0
        estimates[:] = 0.0
        true_res[:] = 0.0
        return ShiftedSolveResult(shifts, solutions, converged, converged_at, estimates,
                                  true_res, np.zeros((0, p)), 0, np.zeros(0, complex),
                                  variant, method, beta, tol,
                                  time.perf_counter() - t_start, stagnated)

    cap = min(maxit, 32)
    V = np.zeros((n, cap + 1), dtype=complex, order="F")
    U = np.zeros((n, cap), dtype=complex, order="F") if store_u else None
    Hbar = np.zeros((cap + 1, cap), dtype=complex)
    cs = np.zeros((p, cap))
    sn = np.zeros((p, cap), dtype=complex)
    g = np.zeros((p, cap + 1), dtype=complex)
    g[:, 0] = beta
    taus = np.zeros(cap, dtype=complex)
    V[:, 0] = b / beta
    history = []
    last_check = np.full(p, np.inf)
    active = np.ones(p, dtype=bool)
    target = tol * beta

    def grow():
        nonlocal cap, V, U, Hbar, cs, sn, g, taus
        new = min(2 * cap, maxit)

        def pad(a, shape, order="C"):
            out = np.zeros(shape, dtype=a.dtype, order=order)
            out[tuple(slice(0, s) for s in a.shape)] = a
            return out

        V = pad(V, (n, new + 1), "F")
        if U is not None:
            U = pad(U, (n, new), "F")
        Hbar = pad(Hbar, (new + 1, new))
        cs = pad(cs, (p, new))
        sn = pad(sn, (p, new))
        g = pad(g, (p, new + 1))
        taus = pad(taus, (new,))
        cap = new

    def basis_state(m):
        return FlexibleBasisState(
            V[:, : m + 1].copy(), None if U is None else U[:, :m].copy(),
            Hbar[: m + 1, :m].copy(), taus[:m].copy(), beta,
        )

    def finalize(k, m):
        z = shifts[k]
        Hz = Hbar[: m + 1, :m] * (z - taus[:m])[None, :]
        Hz[np.arange(m), np.arange(m)] += 1.0
        if variant == "fom":
            rhs = np.zeros(m, dtype=complex)
            rhs[0] = beta
            y = sla.solve(Hz[:m], rhs, check_finite=False)
        else:
            rhs = np.zeros(m + 1, dtype=complex)
            rhs[0] = beta
            y = sla.lstsq(Hz, rhs, check_finite=False)[0]
        if U is not None:
            x = U[:, :m] @ y
        else:
            x = factors.solve(taus[0], V[:, :m] @ y)
        r = b - (K @ x + z * (M @ x))
        return x, float(np.linalg.norm(r)) / beta

    j = 0
    breakdown = False
    for j in range(maxit):
        if j >= cap:
            grow()
        tau = complex(schedule(j))
        taus[j] = tau
        u = factors.solve(tau, V[:, j])
        if U is not None:
            U[:, j] = u
        w = M @ u
        w0 = np.linalg.norm(w)
        h = np.zeros(j + 2, dtype=complex)
        for i in range(j + 1):
            hij = np.vdot(V[:, i], w)
            h[i] = hij
            w -= hij * V[:, i]
        wn = np.linalg.norm(w)
        if wn < _REORTH * w0:
            for i in range(j + 1):
                c = np.vdot(V[:, i], w)
                h[i] += c
                w -= c * V[:, i]
            wn = np.linalg.norm(w)
        h[j + 1] = wn
        Hbar[: j + 2, j] = h
        breakdown = wn <= _BREAKDOWN * max(w0, np.finfo(float).tiny)
        if not breakdown:
            V[:, j + 1] = w / wn

        idx = np.flatnonzero(active)
        cols = (shifts[idx] - tau)[:, None] * h[None, :]
        cols[:, j] += 1.0
        resid_gm, clast = kernels.givens_extend(cols, idx, cs, sn, g, j)
        if variant == "gmres":
            est = resid_gm
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                est = np.where(clast > 0, resid_gm / clast, np.inf)
        if breakdown:
            est = np.zeros_like(est)
        estimates[idx] = est
        row = np.full(p, np.nan)
        row[idx] = est
        history.append(row)

        m = j + 1
        for k in idx[est <= target]:
            x, rel = finalize(k, m)
            ok = rel <= tol or breakdown
            if not ok and rel > 0.5 * last_check[k]:
                # true residual no longer improves: attainable accuracy reached
                ok = True
                stagnated[k] = True
            last_check[k] = rel
            if ok:
                solutions[:, k] = x
                true_res[k] = rel
                converged[k] = True
                converged_at[k] = m
                active[k] = False
        if breakdown or not active.any():
            break

    m = j + 1
    for k in np.flatnonzero(active):
        x, rel = finalize(k, m)
        solutions[:, k] = x
        true_res[k] = rel
        if breakdown:
            converged[k] = True
            converged_at[k] = m
    if not converged.all():
        log.warning("%s solve stopped after %d iterations with %d unconverged shifts",
                    method, m, int((~converged).sum()))

    return ShiftedSolveResult(
        shifts=shifts, solutions=solutions, converged=converged,
        converged_at=converged_at, estimates=estimates, true_residuals=true_res,
        history=np.array(history), iterations=m, taus=taus[:m].copy(),
        variant=variant, method=method, beta=beta, tol=tol,
        wall_seconds=time.perf_counter() - t_start, stagnated=stagnated,
        state=basis_state(m) if keep_basis else None,
    )


def solve_shifted_single(K, M, b, shifts, tau=None, tol=1e-10, maxit=None,
                         variant="gmres", factors=None, keep_basis=False):
    """Solve all shifted systems with one shift-and-invert preconditioner.

    ``tau`` defaults to the shift with the smallest real part. Solutions are
    recovered as ``(K + tau M)^{-1} V_m y`` so ``U`` is never stored.
    """
    if tau is None:
        tau = select_preconditioner_shifts(shifts)[0]
    return _solve_family(K, M, b, shifts, PreconditionerSchedule.single(tau), tol, maxit,
                         variant, factors, store_u=False, keep_basis=keep_basis,
                         method="single")


def solve_shifted_flexible(K, M, b, shifts, schedule=None, tol=1e-10, maxit=None,
                           variant="gmres", factors=None, keep_basis=False):
    """Flexible FOM/GMRES for shifted systems with a preconditioner per iteration.

    ``schedule`` is a :class:`PreconditionerSchedule` or a sequence of
    shifts applied cyclically; by default the two extreme-real-part shifts
    in a 3+2 pattern from :func:`select_preconditioner_shifts`.
    """
    if schedule is None:
        schedule = select_preconditioner_shifts(shifts)[2]
    return _solve_family(K, M, b, shifts, _as_schedule(schedule), tol, maxit, variant,
                         factors, store_u=True, keep_basis=keep_basis, method="flexible")


def solve_shifted_direct(K, M, b, shifts, factors=None):
    """Factorize and solve every shifted system separately (reference path)."""
    t_start = time.perf_counter()
    factors = factors or FactorCache(K, M)
    b = np.asarray(b, dtype=complex).ravel()
    shifts = np.atleast_1d(np.asarray(shifts, dtype=complex)).ravel()
    p = shifts.size
    X = np.column_stack([factors.solve(z, b) for z in shifts]) if p else np.zeros((b.size, 0))
    beta = float(np.linalg.norm(b))
    res = np.array([
        np.linalg.norm(b - (K @ X[:, k] + z * (M @ X[:, k]))) / beta if beta else 0.0
        for k, z in enumerate(shifts)
    ])
    ones = np.ones(p, dtype=bool)
    return ShiftedSolveResult(
        shifts=shifts, solutions=X, converged=ones, converged_at=np.ones(p, int),
        estimates=res * beta, true_residuals=res, history=np.zeros((0, p)),
        iterations=1, taus=shifts.copy(), variant="direct", method="direct",
        beta=beta, tol=0.0, wall_seconds=time.perf_counter() - t_start,
        stagnated=np.zeros(p, dtype=bool),
    )
