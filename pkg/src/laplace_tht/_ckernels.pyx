# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, hypot

cnp.import_array()

cdef extern from "complex.h" nogil:
    double cabs(double complex)
    double complex conj(double complex)


def givens_extend(double complex[:, ::1] cols, const long[::1] idx,
                  double[:, ::1] cs, double complex[:, ::1] sn,
                  double complex[:, ::1] g, Py_ssize_t j):
    cdef Py_ssize_t n_act = idx.shape[0]
    cdef Py_ssize_t r, i, k
    cdef double complex a, b, si, phase, gj
    cdef double ci, abs_a, abs_b, nu
    resid_arr = np.empty(n_act)
    clast_arr = np.empty(n_act)
    cdef double[::1] resid = resid_arr
    cdef double[::1] clast = clast_arr
    with nogil:
        for r in range(n_act):
            k = idx[r]
            for i in range(j):
                a = cols[r, i]
                b = cols[r, i + 1]
                ci = cs[k, i]
                si = sn[k, i]
                cols[r, i] = ci * a + si * b
                cols[r, i + 1] = -conj(si) * a + ci * b
            a = cols[r, j]
            b = cols[r, j + 1]
            abs_a = cabs(a)
            abs_b = cabs(b)
            if abs_b == 0.0:
                ci = 1.0
                si = 0.0
            elif abs_a == 0.0:
                ci = 0.0
                si = conj(b) / abs_b
                cols[r, j] = abs_b
            else:
                nu = hypot(abs_a, abs_b)
                phase = a / abs_a
                ci = abs_a / nu
                si = phase * conj(b) / nu
                cols[r, j] = phase * nu
            cols[r, j + 1] = 0.0
            cs[k, j] = ci
            sn[k, j] = si
            gj = g[k, j]
            g[k, j] = ci * gj
            g[k, j + 1] = -conj(si) * gj
            resid[r] = cabs(g[k, j + 1])
            clast[r] = ci
    return resid_arr, clast_arr


def element_bilinear(const long[:, ::1] elements, const double[:, :, ::1] local,
                     const double complex[:, ::1] phi, const double complex[:, ::1] psi,
                     const double complex[::1] coef):
    cdef Py_ssize_t n_el = elements.shape[0]
    cdef Py_ssize_t p = coef.shape[0]
    cdef Py_ssize_t e, a, b, k
    cdef long na, nb
    cdef double complex acc, lk
    cdef double lab
    out_arr = np.empty(n_el, dtype=np.complex128)
    cdef double complex[::1] out = out_arr
    with nogil:
        for e in range(n_el):
            acc = 0.0
            for a in range(3):
                na = elements[e, a]
                for b in range(3):
                    nb = elements[e, b]
                    lab = local[e, a, b]
                    if lab == 0.0:
                        continue
                    lk = 0.0
                    for k in range(p):
                        lk = lk + coef[k] * phi[na, k] * psi[nb, k]
                    acc = acc + lab * lk
            out[e] = acc
    return out_arr
