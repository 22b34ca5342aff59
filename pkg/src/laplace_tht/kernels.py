"""Select compiled or pure-Python hot kernels at import time.

Set ``LAPLACE_THT_PURE_PYTHON=1`` to force the NumPy fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("LAPLACE_THT_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def givens_extend(cols, idx, cs, sn, g, j, impl=None):
    impl = impl or _impl
    if impl is _pykernels:
        return impl.givens_extend(cols, idx, cs, sn, g, j)
    return impl.givens_extend(
        np.ascontiguousarray(cols), np.ascontiguousarray(idx, dtype=np.int_),
        cs, sn, g, int(j),
    )


def element_bilinear(elements, local, phi, psi, coef, impl=None):
    impl = impl or _impl
    if impl is _pykernels:
        return impl.element_bilinear(elements, local, phi, psi, coef)
    return impl.element_bilinear(
        np.ascontiguousarray(elements, dtype=np.int_),
        np.ascontiguousarray(local, dtype=float),
        np.ascontiguousarray(phi, dtype=complex),
        np.ascontiguousarray(psi, dtype=complex),
        np.ascontiguousarray(coef, dtype=complex),
    )


def available_backends():
    """Map backend name to module, for benchmarks and cross-checks."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
