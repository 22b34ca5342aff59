"""Time the compiled kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--grid 101] [--shifts 20] [--repeat 5]

Prints one CSV line per (kernel, backend) with the best-of-``repeat`` time
and the speedup relative to the fallback, after checking both backends
agree.
"""
import argparse
import sys
import timeit

import numpy as np

from laplace_tht.fem import build_mesh, local_stiffness
from laplace_tht.kernels import available_backends, element_bilinear, givens_extend


def _givens_case(p, m, rng):
    cols = rng.standard_normal((p, m + 2)) + 1j * rng.standard_normal((p, m + 2))
    cs = np.zeros((p, m + 2))
    sn = np.zeros((p, m + 2), dtype=complex)
    g = np.zeros((p, m + 2), dtype=complex)
    g[:, 0] = 1.0
    return cols, np.arange(p), cs, sn, g


def bench_givens(impl, p, m, repeat):
    rng = np.random.default_rng(0)

    def run():
        cols, idx, cs, sn, g = _givens_case(p, m, rng)
        # sweep the columns one Arnoldi step at a time, as the solver does
        for j in range(m):
            givens_extend(cols[:, : j + 2].copy(), idx, cs, sn, g, j, impl=impl)

    return min(timeit.repeat(run, number=1, repeat=repeat))


def bench_bilinear(impl, mesh, p, repeat):
    rng = np.random.default_rng(1)
    local = local_stiffness(mesh)
    phi = rng.standard_normal((mesh.n_nodes, p)) + 1j * rng.standard_normal((mesh.n_nodes, p))
    psi = rng.standard_normal((mesh.n_nodes, p)) + 1j * rng.standard_normal((mesh.n_nodes, p))
    coef = rng.standard_normal(p) + 1j * rng.standard_normal(p)
    out = element_bilinear(mesh.elements, local, phi, psi, coef, impl=impl)
    t = min(timeit.repeat(lambda: element_bilinear(mesh.elements, local, phi, psi, coef,
                                                   impl=impl), number=1, repeat=repeat))
    return t, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", type=int, default=101)
    ap.add_argument("--shifts", type=int, default=20)
    ap.add_argument("--iters", type=int, default=60)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the fallback is timed", file=sys.stderr)
    mesh = build_mesh(args.grid, 100.0)
    print("kernel,backend,seconds,speedup")
    results = {}
    for name, impl in backends.items():
        results[("bilinear", name)] = bench_bilinear(impl, mesh, args.shifts, args.repeat)
        results[("givens", name)] = (bench_givens(impl, args.shifts, args.iters, args.repeat),
                                     None)
    if "cython" in backends:
        a, b = results[("bilinear", "python")][1], results[("bilinear", "cython")][1]
        err = np.max(np.abs(a - b)) / np.max(np.abs(a))
        if err > 1e-12:
            print(f"backends disagree: {err:.2e}", file=sys.stderr)
            return 1
    for kernel in ("bilinear", "givens"):
        base = results[(kernel, "python")][0]
        for name in backends:
            t = results[(kernel, name)][0]
            print(f"{kernel},{name},{t:.6g},{base / t:.3g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
