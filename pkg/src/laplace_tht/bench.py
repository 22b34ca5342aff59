"""Solver benchmarks: iteration counts and timings for the standard test problems.

Every function yields rows with the columns in :data:`COLUMNS`; ``time`` is
in minutes. Fields are generated once per (kind, grid) and rescaled for each
variance, so the random-field rows of one seed share the same underlying
draw.
"""
from __future__ import annotations

import time
from functools import lru_cache

import numpy as np

from .condest import shifted_condition
from .fem import assemble, build_mesh, point_source
from .fields import DEFAULT_MEAN_LOG, CovarianceModel, franke_field, random_field
from .forward import ForwardProblem, crank_nicolson, solve_forward, solve_forward_batch
from .shifted import (
    FactorCache,
    solve_shifted_direct,
    solve_shifted_flexible,
    solve_shifted_single,
)
from .talbot import build_contour

COLUMNS = ("field", "variance", "time", "grid", "solver", "iterations", "wall_seconds",
           "cond_estimate")

PRESETS = {
    "table1": dict(grids=[101], fields=["franke", "random"], variances=[0.8, 1.6, 3.5],
                   times_min=[5.0], solvers=["single", "flexible"], condition=True),
    "table2": dict(grids=[101], fields=["franke", "random"], variances=[1.6],
                   times_min=[1.0, 5.0, 20.0], solvers=["single", "flexible"], condition=True),
    "table3": dict(grids=[41, 101, 201], fields=["franke"], variances=[1.6],
                   times_min=[5.0], solvers=["single", "flexible"], condition=False),
    "fig7": dict(grids=[101], fields=["random"], variances=[1.6],
                 times_min=[1.0, 5.0, 20.0], solvers=["direct", "flexible"], condition=False,
                 cn_dt_s=1.0),
    "batch": dict(grids=[101], fields=["franke"], variances=[1.6],
                  times_min=list(np.linspace(40.0, 60.0, 40)), solvers=["flexible"],
                  condition=False),
}


@lru_cache(maxsize=8)
def _unit_deviation(kind, n_per_side, L, seed, corr_length):
    mesh = build_mesh(n_per_side, L)
    if kind == "random":
        f = random_field(mesh, CovarianceModel(1.0, corr_length or L), mean_log=0.0, seed=seed)
        return f.log_values
    f = franke_field(mesh, 1.0, mean_log=0.0)
    return f.log_values


def log_field(kind, variance, n_per_side, L=100.0, mean_log=DEFAULT_MEAN_LOG, seed=0,
              corr_length=None):
    """Per-element log-transmissivity of a benchmark field."""
    dev = _unit_deviation(kind, n_per_side, float(L), seed, corr_length)
    return mean_log + np.sqrt(variance) * dev


def setup(kind, variance, n_per_side, L=100.0, storativity=1e-5, seed=0, source=(50.0, 50.0)):
    mesh = build_mesh(n_per_side, L)
    ops = assemble(mesh, np.exp(log_field(kind, variance, n_per_side, L, seed=seed)),
                   storativity)
    b = ops.restrict(point_source(mesh, source))
    return ops, b


def max_condition(ops, shifts, factors) -> float:
    """Largest 1-norm condition estimate of ``K + zM`` over the shifts."""
    return max(shifted_condition(ops.K, ops.M, z, factors) for z in shifts)


def iteration_rows(grids, fields, variances, times_min, solvers, condition=False, n_quad=40,
                   tol=1e-10, variant="gmres", L=100.0, seed=0, **_):
    """Rows for single/flexible/direct shifted solves at one time each."""
    for n in grids:
        for kind in fields:
            for var in variances:
                ops, b = setup(kind, var, n, L, seed=seed)
                for tmin in times_min:
                    contour = build_contour(n_quad, 60.0 * tmin)
                    factors = FactorCache(ops.K, ops.M)
                    cond = max_condition(ops, contour.nodes, factors) if condition else np.nan
                    for solver in solvers:
                        # fresh cache so the timing includes its factorizations
                        fc = FactorCache(ops.K, ops.M)
                        t0 = time.perf_counter()
                        if solver == "single":
                            res = solve_shifted_single(ops.K, ops.M, b, contour.nodes, tol=tol,
                                                       variant=variant, factors=fc)
                        elif solver == "flexible":
                            res = solve_shifted_flexible(ops.K, ops.M, b, contour.nodes,
                                                         tol=tol, variant=variant, factors=fc)
                        else:
                            res = solve_shifted_direct(ops.K, ops.M, b, contour.nodes,
                                                       factors=fc)
                        wall = time.perf_counter() - t0
                        its = res.iterations if solver != "direct" else contour.n_half
                        yield dict(field=kind, variance=var, time=tmin, grid=n, solver=solver,
                                   iterations=its, wall_seconds=wall, cond_estimate=cond)


def fig7_rows(grids, fields, variances, times_min, solvers, cn_dt_s=1.0, n_quad=20,
              tol=1e-10, L=100.0, seed=0, q0=8.5e-4, **_):
    """Laplace solves at single times versus Crank-Nicolson up to the same time."""
    for n in grids:
        for kind in fields:
            for var in variances:
                ops, b = setup(kind, var, n, L, seed=seed)
                for tmin in times_min:
                    prob = ForwardProblem(ops, b, q0, [60.0 * tmin], n_quad=n_quad)
                    for solver in solvers:
                        t0 = time.perf_counter()
                        sol = solve_forward(prob, solver=solver, tol=tol)
                        wall = time.perf_counter() - t0
                        its = sol.iterations[0] if solver != "direct" else n_quad // 2
                        yield dict(field=kind, variance=var, time=tmin, grid=n,
                                   solver=f"laplace-{solver}", iterations=its,
                                   wall_seconds=wall, cond_estimate=np.nan)
                    traj = crank_nicolson(ops, b, q0, None, cn_dt_s, 60.0 * tmin, keep="final")
                    yield dict(field=kind, variance=var, time=tmin, grid=n,
                               solver="crank-nicolson", iterations=len_steps(tmin, cn_dt_s),
                               wall_seconds=traj.wall_seconds, cond_estimate=np.nan)


def len_steps(tmin, dt):
    return int(np.ceil(60.0 * tmin / dt - 1e-9))


def batch_rows(grids, fields, variances, times_min, n_quad=40, tol=1e-10, L=100.0, seed=0,
               q0=8.5e-4, **_):
    """Pooled multi-time flexible solve plus the single-time run at the middle time."""
    times = np.asarray(times_min, dtype=float)
    for n in grids:
        for kind in fields:
            for var in variances:
                ops, b = setup(kind, var, n, L, seed=seed)
                prob = ForwardProblem(ops, b, q0, 60.0 * times, n_quad=n_quad)
                t0 = time.perf_counter()
                sol = solve_forward_batch(prob, tol=tol)
                wall = time.perf_counter() - t0
                yield dict(field=kind, variance=var, time=f"{times[0]:g}:{times[-1]:g}",
                           grid=n, solver="batch-flexible", iterations=sol.iterations[0],
                           wall_seconds=wall, cond_estimate=np.nan)
                mid = 0.5 * (times[0] + times[-1])
                single = ForwardProblem(ops, b, q0, [60.0 * mid], n_quad=n_quad)
                t0 = time.perf_counter()
                one = solve_forward(single, solver="flexible", tol=tol)
                yield dict(field=kind, variance=var, time=mid, grid=n, solver="flexible",
                           iterations=one.iterations[0], wall_seconds=time.perf_counter() - t0,
                           cond_estimate=np.nan)


def run_preset(name, **overrides):
    """Rows of a named preset; keyword arguments override its settings."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}")
    opts = dict(PRESETS[name])
    opts.update({k: v for k, v in overrides.items() if v is not None})
    if name == "fig7":
        return list(fig7_rows(**opts))
    if name == "batch":
        return list(batch_rows(**opts))
    return list(iteration_rows(**opts))
