"""Experiment configuration: JSON schema, defaults and unit conversion.

Configs use minutes for times and L/s for pumping rates; everything
downstream of :func:`load_config` works in seconds and m^3/s.
"""
from __future__ import annotations

import copy
import hashlib
import json
import re
from pathlib import Path

import jsonschema

from .errors import InvalidArgumentError

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_POINT = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}


def _opt(schema):
    return {"anyOf": [schema, {"type": "null"}]}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


SCHEMA = _obj({
    "output_dir": {"type": "string", "description": "directory for all artifacts"},
    "grid": _obj({
        "n_per_side": {"type": "integer", "minimum": 2, "description": "nodes per side"},
        "L": dict(_POS, description="domain side length [m]"),
    }),
    "field": _obj({
        "kind": {"enum": ["random", "franke", "constant", "csv"]},
        "variance": dict(_POS, description="log-field variance [-]"),
        "mean_log": dict(_NUM, description="mean of ln(transmissivity [m^2/s])"),
        "corr_length": _opt(dict(_POS, description="correlation length [m]; default L")),
        "seed": {"type": "integer", "minimum": 0},
        "resolution": {"enum": ["cell", "element"]},
        "path": _opt({"type": "string", "description": "field CSV (kind=csv)"}),
    }),
    "storativity": dict(_POS, description="storativity S_s [-]"),
    "sources": {"type": "array", "minItems": 1, "items": _obj({
        "x": dict(_NUM, description="[m]"),
        "y": dict(_NUM, description="[m]"),
        "rate_lps": dict(_NUM, description="pumping rate [L/s]"),
    }, required=("x", "y"))},
    "receivers": {"oneOf": [
        {"type": "array", "items": _POINT, "minItems": 1},
        _obj({"box": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
              "n": {"type": "integer", "minimum": 1}}, required=("box", "n")),
    ], "description": "list of [x, y] in m, or an evenly spaced n x n grid over box^2"},
    "times_min": {"type": "array", "items": _POS, "minItems": 1,
                  "description": "measurement times [min]"},
    "contour": _obj({
        "n_quad": {"type": "integer", "minimum": 4, "multipleOf": 2},
        "sigma": _NUM, "mu": _POS, "nu": _POS, "alpha": _POS,
    }),
    "solver": _obj({
        "method": {"enum": ["single", "flexible", "direct"]},
        "variant": {"enum": ["fom", "gmres"]},
        "tol": _POS,
        "maxit": {"type": ["integer", "null"], "minimum": 1},
    }),
    "drawdown": _obj({
        "receiver": _POINT,
        "t_start_min": _POS, "t_end_min": _POS,
        "n_times": {"type": "integer", "minimum": 1},
        "spacing": {"enum": ["linear", "log"]},
    }),
    "jacobian": _obj({
        "format": {"enum": ["npy", "csv"]},
        "include_storativity": {"type": "boolean"},
        "include_z_factor": {"type": "boolean"},
        "fd_step": _POS,
        "fd_columns": {"type": ["integer", "null"], "minimum": 1,
                       "description": "number of evenly spaced columns to check; null = all"},
        "fd_rtol": _POS,
    }),
    "inversion": _obj({
        "R": {"oneOf": [_POS, {"enum": ["noise"]}],
              "description": "noise variance [m^2], or 'noise' for (noise_percent/100 * y)^2"},
        "rtol": _POS,
        "max_gn": {"type": "integer", "minimum": 1},
        "noise_percent": {"type": "number", "minimum": 0},
        "noise_seed": {"type": "integer", "minimum": 0},
        "damping": {"type": "boolean"},
        "prior_variance": _opt(_POS),
        "prior_corr_length": _opt(_POS),
        "cn_dt_s": dict(_POS, description="Crank-Nicolson step for synthetic data [s]"),
        "initial_mean_log": _opt(_NUM),
    }),
    "bench": _obj({
        "preset": {"enum": ["table1", "table2", "table3", "fig7", "batch"]},
        "grids": {"type": "array", "items": {"type": "integer", "minimum": 3}},
        "fields": {"type": "array", "items": {"enum": ["random", "franke"]}},
        "variances": {"type": "array", "items": _POS},
        "times_min": {"type": "array", "items": _POS},
        "solvers": {"type": "array", "items": {"enum": ["single", "flexible", "direct"]}},
        "condition": {"type": "boolean"},
        "cn_dt_s": _POS,
    }),
})

DEFAULTS = {
    "output_dir": "out",
    "grid": {"n_per_side": 101, "L": 100.0},
    "field": {"kind": "random", "variance": 1.6, "mean_log": -9.210340371976182,
              "corr_length": None, "seed": 0, "resolution": "cell", "path": None},
    "storativity": 1e-5,
    "sources": [{"x": 50.0, "y": 50.0, "rate_lps": 0.85}],
    "receivers": [[70.0, 70.0]],
    "times_min": [5.0],
    "contour": {"n_quad": 40},
    "solver": {"method": "flexible", "variant": "gmres", "tol": 1e-10, "maxit": None},
    "drawdown": {"receiver": [70.0, 70.0], "t_start_min": 0.1, "t_end_min": 30.0,
                 "n_times": 40, "spacing": "log"},
    "jacobian": {"format": "npy", "include_storativity": False, "include_z_factor": True,
                 "fd_step": 1e-3, "fd_columns": None, "fd_rtol": 1e-4},
    "inversion": {"R": 1e-7, "rtol": 1e-3, "max_gn": 15, "noise_percent": 2.0,
                  "noise_seed": 0, "damping": True, "prior_variance": None,
                  "prior_corr_length": None, "cn_dt_s": 1.0, "initial_mean_log": None},
    "bench": {"preset": "table1"},
}


class ConfigError(InvalidArgumentError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def _locate(text, path):
    """Best-effort line of the JSON value at ``path`` (keys and list indices)."""
    pos = 0
    for key in path:
        if isinstance(key, str):
            m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
            if m is None:
                break
            pos = m.start()
    return text.count("\n", 0, pos) + 1


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_config(text: str, source="<config>") -> dict:
    """Validate JSON text and merge it over :data:`DEFAULTS`."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON: {exc.msg}", exc.lineno) from exc
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        where = "/".join(str(p) for p in path) or "<root>"
        if err.validator == "additionalProperties" and isinstance(err.instance, dict):
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            path = path + extra[:1]
        raise ConfigError(f"{source}: {where}: {err.message}", _locate(text, path))
    cfg = _merge(DEFAULTS, raw)
    _check_semantics(cfg)
    return cfg


def load_config(path) -> dict:
    """Load a config file; a run manifest is accepted and replays its config."""
    path = Path(path)
    text = path.read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        obj = None
    if isinstance(obj, dict) and "config_resolved" in obj:
        text = json.dumps(obj["config_resolved"], indent=2)
    cfg = parse_config(text, str(path))
    cfg["_hash"] = config_hash(raw_text=text)
    return cfg


def config_hash(cfg=None, raw_text=None) -> str:
    """SHA-256 of the canonical JSON form."""
    obj = json.loads(raw_text) if raw_text is not None else {
        k: v for k, v in cfg.items() if not k.startswith("_")}
    canon = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _check_semantics(cfg):
    L = cfg["grid"]["L"]
    pts = [(s["x"], s["y"]) for s in cfg["sources"]]
    if isinstance(cfg["receivers"], list):
        pts += [tuple(r) for r in cfg["receivers"]]
    for x, y in pts:
        if not (0 <= x <= L and 0 <= y <= L):
            raise ConfigError(f"location ({x}, {y}) lies outside [0, {L}]^2")
    t = cfg["times_min"]
    if any(b < a for a, b in zip(t, t[1:])):
        raise ConfigError("times_min must be sorted")
    if cfg["field"]["kind"] == "csv" and not cfg["field"]["path"]:
        raise ConfigError("field.kind = csv requires field.path")
    dd = cfg["drawdown"]
    if dd["t_end_min"] <= dd["t_start_min"] and dd["n_times"] > 1:
        raise ConfigError("drawdown.t_end_min must exceed t_start_min")


def receivers_from(cfg):
    """Receiver coordinates as a list of (x, y)."""
    spec = cfg["receivers"]
    if isinstance(spec, list):
        return [tuple(map(float, r)) for r in spec]
    lo, hi = spec["box"]
    n = spec["n"]
    step = (hi - lo) / (n - 1) if n > 1 else 0.0
    return [(lo + i * step, lo + j * step) for i in range(n) for j in range(n)]


def seconds(minutes):
    return [60.0 * float(m) for m in minutes]


def rates_m3s(cfg):
    return [1e-3 * float(s.get("rate_lps", 0.85)) for s in cfg["sources"]]
