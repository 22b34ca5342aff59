"""Pure-Python (NumPy) implementations of the hot kernels.

These mirror ``_ckernels.pyx`` one to one and are used when the compiled
extension is unavailable or ``LAPLACE_THT_PURE_PYTHON=1`` is set.
"""
import numpy as np


def givens_extend(cols, idx, cs, sn, g, j):
    """Append column ``j`` to the incremental QR of every active shift.

    ``cols[r]`` holds the new Hessenberg column (length ``j + 2``) of shift
    ``idx[r]``. Previous rotations ``0..j-1`` are applied, rotation ``j`` is
    generated to annihilate the subdiagonal, and the rotated right-hand side
    ``g`` is advanced. Returns ``|g[idx, j+1]|`` (the least-squares residual)
    and the cosine of the new rotation.
    """
    c_old = cs[idx, :j]
    s_old = sn[idx, :j]
    for i in range(j):
        a = cols[:, i].copy()
        b = cols[:, i + 1]
        ci = c_old[:, i]
        si = s_old[:, i]
        cols[:, i] = ci * a + si * b
        cols[:, i + 1] = -np.conj(si) * a + ci * b

    a = cols[:, j]
    b = cols[:, j + 1]
    abs_a = np.abs(a)
    abs_b = np.abs(b)
    nu = np.hypot(abs_a, abs_b)
    c = np.ones_like(abs_a)
    s = np.zeros_like(a)
    phase = np.ones_like(a)

    zero_b = abs_b == 0.0
    zero_a = (abs_a == 0.0) & ~zero_b
    gen = ~zero_b & ~zero_a
    c[zero_a] = 0.0
    s[zero_a] = np.conj(b[zero_a]) / abs_b[zero_a]
    phase[gen] = a[gen] / abs_a[gen]
    c[gen] = abs_a[gen] / nu[gen]
    s[gen] = phase[gen] * np.conj(b[gen]) / nu[gen]

    r = np.where(zero_b, a, np.where(zero_a, abs_b, phase * nu))
    cols[:, j] = r
    cols[:, j + 1] = 0.0
    cs[idx, j] = c
    sn[idx, j] = s
    gj = g[idx, j]
    g[idx, j] = c * gj
    g[idx, j + 1] = -np.conj(s) * gj
    return np.abs(g[idx, j + 1]), c


def element_bilinear(elements, local, phi, psi, coef):
    """Return ``sum_k coef[k] * phi_e[:, k]^T local[e] psi_e[:, k]`` per element.

    No complex conjugation is applied: the pencil is complex symmetric.
    """
    pe = phi[elements]  # (E, 3, p)
    qe = psi[elements]
    lq = np.einsum("eab,ebk->eak", local, qe)
    return np.einsum("eak,eak,k->e", pe, lq, coef)
