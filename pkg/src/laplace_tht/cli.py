"""Command-line entry point: ``laplace-tht <subcommand> CONFIG``.

Exit status is 0 on success, 1 on a numerical failure and 2 on a usage or
configuration error. Every run writes ``manifest.json`` next to its CSV
outputs. Thread count can be set with ``--threads`` or ``LAPLACE_THT_THREADS``;
it has to be applied before NumPy is imported, so heavy imports happen
inside the subcommand functions.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import time
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config, rates_m3s, receivers_from, seconds

SUBCOMMANDS = ("contour", "forward", "drawdown", "bench", "jacobian", "jacobian-check",
               "invert")
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    if hasattr(v, "dtype") and v.dtype.kind == "f":
        return f"{float(v):.17g}"
    return v


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


# ---------------------------------------------------------------- setup helpers

def _mesh_and_field(cfg):
    import numpy as np

    from .fem import build_mesh
    from .fields import CovarianceModel, FieldRealization, franke_field, random_field, \
        read_field_csv

    g, f = cfg["grid"], cfg["field"]
    mesh = build_mesh(g["n_per_side"], g["L"])
    kind = f["kind"]
    if kind == "random":
        model = CovarianceModel(f["variance"], f["corr_length"] or g["L"])
        fld = random_field(mesh, model, f["mean_log"], f["seed"], f["resolution"])
    elif kind == "franke":
        fld = franke_field(mesh, f["variance"], f["mean_log"])
    elif kind == "constant":
        fld = FieldRealization(np.full(mesh.n_elements, f["mean_log"]), f["mean_log"])
    else:
        fld = read_field_csv(f["path"], mesh)
    return mesh, fld


def _ops(cfg):
    from .fem import assemble

    mesh, fld = _mesh_and_field(cfg)
    return mesh, fld, assemble(mesh, fld.values, cfg["storativity"])


def _contour_opts(cfg):
    return {k: v for k, v in cfg["contour"].items() if k != "n_quad" and v is not None}


def _experiment(cfg):
    from .adjoint import Experiment

    return Experiment([(s["x"], s["y"]) for s in cfg["sources"]], rates_m3s(cfg),
                      receivers_from(cfg), seconds(cfg["times_min"]),
                      n_quad=cfg["contour"]["n_quad"], contour=_contour_opts(cfg))


def _solver_kw(cfg):
    s = cfg["solver"]
    return dict(solver=s["method"], tol=s["tol"], variant=s["variant"], maxit=s["maxit"])


# ---------------------------------------------------------------- subcommands

def cmd_contour(cfg, out):
    from .talbot import build_contour

    rows = []
    for tmin in cfg["times_min"]:
        c = build_contour(cfg["contour"]["n_quad"], 60.0 * tmin, **_contour_opts(cfg))
        for k in range(c.n_half):
            rows.append((tmin, k, c.thetas[k], c.nodes[k].real, c.nodes[k].imag,
                         c.weights[k].real, c.weights[k].imag))
    write_csv(out / "contour.csv",
              ("time_min", "k", "theta", "z_real", "z_imag", "w_real", "w_imag"), rows)
    return {"files": ["contour.csv"]}


def cmd_forward(cfg, out):
    from .fem import point_source
    from .forward import ForwardProblem, solve_forward

    mesh, fld, ops = _ops(cfg)
    b = sum(q * ops.restrict(point_source(mesh, (s["x"], s["y"])))
            for s, q in zip(cfg["sources"], rates_m3s(cfg)))
    prob = ForwardProblem(ops, b, 1.0, seconds(cfg["times_min"]),
                          n_quad=cfg["contour"]["n_quad"], contour=_contour_opts(cfg))
    kw = _solver_kw(cfg)
    sol = solve_forward(prob, kw["solver"], kw["tol"], kw["variant"], kw["maxit"])
    H = sol.full_heads()
    header = ["node", "x", "y"] + [f"head_t{t:g}min" for t in cfg["times_min"]]
    rows = ([i, mesh.nodes[i, 0], mesh.nodes[i, 1], *map(float, H[:, i])]
            for i in range(mesh.n_nodes))
    write_csv(out / "heads.csv", header, rows)
    write_csv(out / "forward_diagnostics.csv", ("time_min", "iterations", "wall_seconds"),
              [(t, it, sol.wall_seconds / len(sol.iterations))
               for t, it in zip(cfg["times_min"], sol.iterations)])
    return {"files": ["heads.csv", "forward_diagnostics.csv"], "iterations": sol.iterations}


def cmd_drawdown(cfg, out):
    import numpy as np

    from .fem import point_source
    from .forward import ForwardProblem, solve_forward

    mesh, fld, ops = _ops(cfg)
    dd = cfg["drawdown"]
    space = np.geomspace if dd["spacing"] == "log" else np.linspace
    times = space(dd["t_start_min"], dd["t_end_min"], dd["n_times"])
    b = sum(q * ops.restrict(point_source(mesh, (s["x"], s["y"])))
            for s, q in zip(cfg["sources"], rates_m3s(cfg)))
    prob = ForwardProblem(ops, b, 1.0, 60.0 * times, n_quad=cfg["contour"]["n_quad"],
                          contour=_contour_opts(cfg))
    kw = _solver_kw(cfg)
    sol = solve_forward(prob, kw["solver"], kw["tol"], kw["variant"], kw["maxit"])
    curve = sol.at(tuple(dd["receiver"]))
    write_csv(out / "drawdown.csv", ("time_min", "head"), zip(map(float, times),
                                                            map(float, curve)))
    return {"files": ["drawdown.csv"]}


def cmd_bench(cfg, out):
    from .bench import COLUMNS, run_preset

    opts = dict(cfg["bench"])
    preset = opts.pop("preset")
    opts.setdefault("tol", cfg["solver"]["tol"])
    rows = run_preset(preset, L=cfg["grid"]["L"], seed=cfg["field"]["seed"], **opts)
    write_csv(out / "bench.csv", COLUMNS, ([r[c] for c in COLUMNS] for r in rows))
    return {"files": ["bench.csv"], "preset": preset}


def cmd_jacobian(cfg, out):
    import numpy as np

    from .adjoint import assemble_jacobian

    mesh, fld, ops = _ops(cfg)
    ex = _experiment(cfg)
    jc = cfg["jacobian"]
    s = cfg["solver"]
    res = assemble_jacobian(ops, ex, solver=s["method"], tol=s["tol"], variant=s["variant"],
                            include_storativity=jc["include_storativity"],
                            include_z_factor=jc["include_z_factor"])
    files = []
    if jc["format"] == "npy":
        np.save(out / "jacobian.npy", res.J)
        files.append("jacobian.npy")
    else:
        n_el = mesh.n_elements
        header = [f"dlogK_{e}" for e in range(n_el)]
        if jc["include_storativity"]:
            header += [f"dlogS_{e}" for e in range(n_el)]
        write_csv(out / "jacobian.csv", header, (list(map(float, r)) for r in res.J))
        files.append("jacobian.csv")
    write_csv(out / "predictions.csv", ("row", "source", "receiver", "time_min", "head"),
              ((ex.row_index(i, j, k), i, j, cfg["times_min"][k], float(res.predictions[
                  ex.row_index(i, j, k)])) for i, j, k in ex.rows()))
    files.append("predictions.csv")
    return {"files": files, "shape": list(res.J.shape), "wall_jacobian": res.wall_seconds}


def cmd_jacobian_check(cfg, out):
    import numpy as np

    from .adjoint import assemble_jacobian, finite_difference_jacobian

    mesh, fld, ops = _ops(cfg)
    ex = _experiment(cfg)
    jc = cfg["jacobian"]
    res = assemble_jacobian(ops, ex, tol=cfg["solver"]["tol"],
                            include_z_factor=jc["include_z_factor"])
    n_cols = jc["fd_columns"] or mesh.n_elements
    cols = np.unique(np.linspace(0, mesh.n_elements - 1, n_cols).round().astype(int))
    fd = finite_difference_jacobian(mesh, fld.log_values, np.log(cfg["storativity"]), ex,
                                    step=jc["fd_step"], elements=cols)
    J = res.J[:, cols]
    significant = np.abs(J) > 1e-3 * np.abs(res.J).max(axis=1, keepdims=True)
    rel = np.where(significant, np.abs(J - fd) / np.maximum(np.abs(fd), 1e-300), 0.0)
    worst = float(rel.max()) if rel.size else 0.0
    write_csv(out / "jacobian_check.csv", ("element", "max_rel_error", "n_significant"),
              ((int(e), float(rel[:, j].max()), int(significant[:, j].sum()))
               for j, e in enumerate(cols)))
    print(f"max relative error {worst:.3e} over {int(significant.sum())} entries")
    return {"files": ["jacobian_check.csv"], "max_rel_error": worst,
            "passed": worst <= jc["fd_rtol"]}


def cmd_invert(cfg, out):
    import numpy as np

    from .fields import CovarianceModel, FieldRealization, covariance_matrix, write_field_csv
    from .geostat import InversionProblem, THTForward, invert, relative_l2, \
        synthetic_measurements

    mesh, truth, _ = _ops(cfg)
    ex = _experiment(cfg)
    inv = cfg["inversion"]
    y, clean = synthetic_measurements(mesh, truth.log_values, ex, cfg["storativity"],
                                      inv["noise_percent"], inv["noise_seed"], inv["cn_dt_s"])
    f = cfg["field"]
    model = CovarianceModel(inv["prior_variance"] or f.get("variance") or 1.0,
                            inv["prior_corr_length"] or f["corr_length"] or cfg["grid"]["L"])
    Q = covariance_matrix(mesh.centroids, model)
    R = (0.01 * inv["noise_percent"] * y) ** 2 if inv["R"] == "noise" else inv["R"]
    s = cfg["solver"]
    fwd = THTForward(mesh, ex, cfg["storativity"], solver=s["method"], tol=s["tol"])
    prob = InversionProblem(y, Q, fwd, R=R)
    m0 = inv["initial_mean_log"] if inv["initial_mean_log"] is not None else f["mean_log"]
    res = invert(prob, np.full(mesh.n_elements, m0), inv["max_gn"], inv["rtol"],
                 inv["damping"])
    write_field_csv(out / "estimate.csv", mesh, FieldRealization(res.s, float(res.beta[0])))
    write_field_csv(out / "truth.csv", mesh, truth)
    keys = ("iteration", "objective", "misfit", "prior", "alpha", "step_norm",
            "saddle_residual", "drift_residual")
    write_csv(out / "history.csv", keys, ([h[k] for k in keys] for h in res.history))
    c = mesh.centroids
    box_lo, box_hi = _receiver_box(ex.receivers)
    box = np.all((c >= box_lo) & (c <= box_hi), axis=1)
    metrics = {
        "rel_l2_box": relative_l2(res.s, truth.log_values, box),
        "rel_l2_global": relative_l2(res.s, truth.log_values),
        "rel_l2_box_demeaned": relative_l2(res.s - truth.log_values.mean(),
                                           truth.log_values - truth.log_values.mean(), box),
        "rel_l2_global_demeaned": relative_l2(res.s - truth.log_values.mean(),
                                              truth.log_values - truth.log_values.mean()),
        "gn_iterations": len(res.history) - 1,
        "converged": res.converged,
        "reason": res.reason,
        "box": [box_lo, box_hi],
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    return {"files": ["estimate.csv", "truth.csv", "history.csv", "metrics.json"],
            "metrics": metrics}


def _receiver_box(receivers):
    lo = float(min(receivers.min(axis=0)))
    hi = float(max(receivers.max(axis=0)))
    return lo, hi


COMMANDS = {
    "contour": cmd_contour,
    "forward": cmd_forward,
    "drawdown": cmd_drawdown,
    "bench": cmd_bench,
    "jacobian": cmd_jacobian,
    "jacobian-check": cmd_jacobian_check,
    "invert": cmd_invert,
}


# ---------------------------------------------------------------- driver

def _versions():
    import numpy
    import scipy

    from .kernels import BACKEND

    return {"laplace_tht": __version__, "python": platform.python_version(),
            "numpy": numpy.__version__, "scipy": scipy.__version__, "backend": BACKEND}


def build_parser():
    p = argparse.ArgumentParser(prog="laplace-tht", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("config", help="JSON experiment configuration")
    p.add_argument("-o", "--output", help="output directory (overrides output_dir)")
    p.add_argument("--threads", type=int, help="BLAS/OpenMP thread count")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    threads = args.threads or os.environ.get("LAPLACE_THT_THREADS")
    if threads:
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)
    import logging

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.output or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)

    from .errors import ConvergenceError, FactorizationError, InvalidArgumentError

    t0 = time.perf_counter()
    try:
        info = COMMANDS[args.subcommand](cfg, out)
    except (ConvergenceError, FactorizationError) as exc:
        print(f"error: numerical failure in {args.subcommand}: {exc}", file=sys.stderr)
        if getattr(exc, "unconverged", None):
            print(f"unconverged shifts: {exc.unconverged}", file=sys.stderr)
        return 1
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    manifest = {
        "subcommand": args.subcommand,
        "config": str(Path(args.config).resolve()),
        "config_hash": cfg["_hash"],
        "config_resolved": {k: v for k, v in cfg.items() if not k.startswith("_")},
        "seeds": {"field": cfg["field"]["seed"], "noise": cfg["inversion"]["noise_seed"]},
        "versions": _versions(),
        "threads": threads,
        "wall_seconds": time.perf_counter() - t0,
        "result": info,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    if args.subcommand == "jacobian-check" and not info["passed"]:
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
