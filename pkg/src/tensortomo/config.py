"""Experiment configuration: TOML file, dotted-path overrides, validation and hashing."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import tomli

from .errors import ConfigError

DEFAULTS: dict = {
    "seed": 0,
    "output": {"dir": "out"},
    "metric": {"kind": "conformal_radial", "profile": {"kind": "linear", "a": 2.0, "b": 1.0}, "radius": 1.0},
    "lens": {"radius": 1.0, "c": 0.5, "kappa": 0.25},
    "grid": {"shape": [16, 16, 16]},
    "fan": {"x_min": 0.05, "x_max": 0.5, "n_x": 8, "y_extent": 0.8, "n_y": 13, "n_lambda": 5,
            "n_omega": 12, "C2": 1.0},
    "transform": {"rank": 4, "step": 0.03, "tmax": 10.0},
    "weight": {"F": 1.0},
    "cutoff": {"kind": "gaussian", "nu": 0.25, "width": 1.0},
    "inversion": {"mu_rel": 1e-2, "maxiter": 400, "rtol": 1e-8, "x_min": 0.1, "taus": [0.0],
                  "overlap": 0.1, "interior_x": 0.2, "interior_rho": 0.1, "weight_data": False,
                  "data": ""},
    "phantom": {"kind": "solenoidal", "n_bumps": 4, "radius": 0.35, "file": ""},
    "qp": {"rho": 1.0, "scale": 0.05, "x_max": 0.45, "width": 0.4},
    "symbols": {"n": 3, "directions": 1000, "finite_shape": [31, 31], "curvature_bound": 0.0,
                "mutate_entry": ""},
    "foliation": {"taus": [0.0, -0.1, -0.2], "probe_samples": 24},
}

_RANGES = {
    "lens.radius": (0.0, None, False),
    "lens.c": (0.0, None, False),
    "lens.kappa": (0.0, None, True),
    "fan.x_min": (0.0, None, True),
    "fan.x_max": (0.0, None, False),
    "fan.n_x": (1, None, True),
    "fan.n_y": (1, None, True),
    "fan.n_lambda": (1, None, True),
    "fan.n_omega": (1, None, True),
    "fan.C2": (0.0, None, False),
    "transform.rank": (0, 4, True),
    "transform.step": (0.0, None, False),
    "transform.tmax": (0.0, None, False),
    "weight.F": (0.0, None, True),
    "cutoff.nu": (0.0, None, False),
    "inversion.mu_rel": (0.0, None, True),
    "inversion.maxiter": (1, None, True),
    "inversion.rtol": (0.0, None, False),
    "inversion.x_min": (0.0, None, True),
    "symbols.n": (3, None, True),
    "symbols.directions": (1, None, True),
    "qp.rho": (0.0, None, False),
    "qp.scale": (0.0, None, False),
    "qp.width": (0.0, None, False),
}

_INTEGERS = {"fan.n_x", "fan.n_y", "fan.n_lambda", "fan.n_omega", "transform.rank", "inversion.maxiter",
             "symbols.n", "symbols.directions"}


def _merge(base: dict, new: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in new.items():
        p = f"{path}{k}"
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, p + ".")
        else:
            out[k] = v
    return out


def parse_override(item: str):
    """Split ``a.b.c=VALUE``; VALUE is parsed as a TOML value, else kept as a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like KEY=VALUE", path=item)
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError("empty override key", path=item)
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    return key, value


def set_path(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for i, p in enumerate(parts[:-1]):
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"{'.'.join(parts[:i + 1])} is not a table", path=key)
        node = nxt
    node[parts[-1]] = value


def get_path(cfg: dict, key: str):
    node = cfg
    for p in key.split("."):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"missing config field {key}", path=key)
        node = node[p]
    return node


def load_config(path=None, overrides=(), seed=None) -> dict:
    """Defaults, then the TOML file, then ``--set`` overrides; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {p}: {exc}") from exc
        try:
            cfg = _merge(cfg, tomli.loads(text))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}", path=str(p)) from exc
    for item in overrides:
        k, v = parse_override(item)
        set_path(cfg, k, v)
    if seed is not None:
        cfg["seed"] = int(seed)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}", path=sorted(unknown)[0])
    for key, (lo, hi, inclusive) in _RANGES.items():
        v = get_path(cfg, key)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{key} must be a number, got {v!r}", path=key)
        if key in _INTEGERS and not isinstance(v, int):
            raise ConfigError(f"{key} must be an integer, got {v!r}", path=key)
        if lo is not None and (v < lo or (v == lo and not inclusive)):
            raise ConfigError(f"{key} = {v!r} is below the allowed range", path=key)
        if hi is not None and v > hi:
            raise ConfigError(f"{key} = {v!r} exceeds the allowed range", path=key)
    if get_path(cfg, "fan.x_max") <= get_path(cfg, "fan.x_min"):
        raise ConfigError("fan.x_max must exceed fan.x_min", path="fan.x_max")
    shape = get_path(cfg, "grid.shape")
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(s, int) and s >= 4 for s in shape)):
        raise ConfigError("grid.shape must be three integers >= 4", path="grid.shape")
    if get_path(cfg, "metric.kind") not in ("euclidean", "conformal_radial"):
        raise ConfigError("metric.kind must be 'euclidean' or 'conformal_radial'", path="metric.kind")
    if get_path(cfg, "cutoff.kind") not in ("gaussian", "compact_bump", "constant"):
        raise ConfigError("cutoff.kind must be gaussian, compact_bump or constant", path="cutoff.kind")
    kinds = ("zero", "metric", "bumps", "solenoidal", "potential", "file")
    if get_path(cfg, "phantom.kind") not in kinds:
        raise ConfigError(f"phantom.kind must be one of {kinds}", path="phantom.kind")
    if get_path(cfg, "phantom.kind") == "file" and not Path(get_path(cfg, "phantom.file")).is_file():
        raise ConfigError("phantom.file does not exist", path="phantom.file")
    if get_path(cfg, "qp.x_max") <= get_path(cfg, "inversion.x_min"):
        raise ConfigError("qp.x_max must exceed inversion.x_min", path="qp.x_max")
    data = get_path(cfg, "inversion.data")
    if data and not Path(data).is_file():
        raise ConfigError("inversion.data does not exist", path="inversion.data")
    taus = get_path(cfg, "inversion.taus")
    if not (isinstance(taus, list) and taus and all(isinstance(t, (int, float)) for t in taus)):
        raise ConfigError("inversion.taus must be a non-empty list of numbers", path="inversion.taus")


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON form (sorted keys), independent of output dir."""
    c = copy.deepcopy(cfg)
    c.get("output", {}).pop("dir", None)
    return hashlib.sha256(json.dumps(c, sort_keys=True, default=str).encode()).hexdigest()
