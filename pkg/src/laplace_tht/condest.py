"""Hager-style 1-norm and condition number estimation from matrix actions."""
from __future__ import annotations

import numpy as np

from .errors import FactorizationError


def _sign(y):
    a = np.abs(y)
    out = np.ones_like(y, dtype=complex)
    nz = a > 0
    out[nz] = y[nz] / a[nz]
    return out


def onenorm_estimate(apply, apply_adjoint, n: int, maxiter: int = 5) -> float:
    """Lower bound on ``||A||_1`` from products with ``A`` and ``A^H``.

    Hager's gradient ascent on the unit 1-norm ball, complex version,
    followed by Higham's alternating-sign test vector. Every candidate is
    ``||A x||_1 / ||x||_1`` for an explicit ``x``, so the result never
    exceeds the true norm.
    """
    x = np.full(n, 1.0 / n, dtype=complex)
    est = 0.0
    last_j = -1
    for it in range(maxiter):
        y = np.asarray(apply(x))
        est_new = float(np.abs(y).sum())
        if it > 0 and est_new <= est:
            break
        est = est_new
        z = np.asarray(apply_adjoint(_sign(y)))
        j = int(np.argmax(np.abs(z)))
        if it > 0 and (np.abs(z[j]) <= np.real(np.vdot(z, x)) or j == last_j):
            break
        last_j = j
        x = np.zeros(n, dtype=complex)
        x[j] = 1.0
    if n > 1:
        alt = np.array([(-1.0) ** i * (1.0 + i / (n - 1)) for i in range(n)], dtype=complex)
    else:
        alt = np.ones(1, dtype=complex)
    y = np.asarray(apply(alt))
    est = max(est, float(np.abs(y).sum() / np.abs(alt).sum()))
    return est


def estimate_condition_1norm(apply, apply_adjoint, solve, solve_adjoint, n: int) -> float:
    """Estimate ``kappa_1(A) = ||A||_1 ||A^{-1}||_1`` as a lower bound."""
    norm_a = onenorm_estimate(apply, apply_adjoint, n)
    try:
        norm_inv = onenorm_estimate(solve, solve_adjoint, n)
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        raise FactorizationError(f"inverse action failed: {exc}") from exc
    if not np.isfinite(norm_inv):
        raise FactorizationError("inverse action produced non-finite values")
    return norm_a * norm_inv


def shifted_condition(K, M, z, factors) -> float:
    """Condition estimate of ``K + zM`` using a factorization from ``factors``."""
    A = (K + z * M).tocsc()
    AH = A.conj().T.tocsc()
    lu = factors.get(z)
    return estimate_condition_1norm(
        lambda v: A @ v,
        lambda v: AH @ v,
        lambda v: lu.solve(np.asarray(v, dtype=complex)),
        lambda v: lu.solve(np.asarray(v, dtype=complex), trans="H"),
        A.shape[0],
    )
