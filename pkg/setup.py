"""Build the optional compiled kernels.

The pure-Python fallback in ``laplace_tht._pykernels`` is always available, so
a failed Cython build leaves a working (slower) install.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("LAPLACE_THT_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        extensions = [
            Extension(
                "laplace_tht._ckernels",
                ["src/laplace_tht/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ]
        ext_modules = cythonize(
            extensions,
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )
    except Exception as exc:  # pragma: no cover - build environment dependent
        print(f"laplace_tht: building without compiled kernels ({exc})")
        ext_modules = []

setup(ext_modules=ext_modules)
