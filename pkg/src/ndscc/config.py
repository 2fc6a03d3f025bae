"""Layered configuration: packaged defaults < config file < ``--set`` overrides.

The resolved mapping is validated against a JSON schema; violations raise
:class:`ConfigError` naming the offending field path.  Builders turn config
sections into the domain objects of the other modules.
"""

from __future__ import annotations

import copy
import os
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .simulator import NV_FIELDS, EnsembleConfig, LogNormal, PLReadoutModel, SpinParams

SCHEMA_VERSION = "1.0"
CONFIG_DIR_ENV = "NDSCC_CONFIG_DIR"
DEFAULT_NAME = "default.yaml"


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted location of the bad field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


# -- schema ------------------------------------------------------------------------------

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_PROB = {"type": "number", "minimum": 0, "maximum": 1}
_INT_POS = {"type": "integer", "minimum": 1}


def _obj(props: dict, required=None) -> dict:
    return {"type": "object", "properties": props, "required": sorted(required or props),
            "additionalProperties": False}


_GRID = {
    "oneOf": [
        {"type": "array", "items": _NUM, "minItems": 1},
        _obj({"start": _NUM, "stop": _NUM, "num": _INT_POS,
              "spacing": {"enum": ["log", "linear"]}}, required=["start", "stop", "num"]),
    ]
}
_POS_LIST = {"type": "array", "items": _POS, "minItems": 1}
_LOGNORMAL = _obj({"median": _NONNEG, "gsd": {"type": "number", "minimum": 1}})
_ENSEMBLE_PROPS = {
    "n_nv": _INT_POS,
    "dark_recombination_per_s": _NONNEG,
    "excitation_sat_rate_per_s": _POS,
    "distributions": _obj({name: _LOGNORMAL for name in NV_FIELDS}),
}
_SPIN = _obj({
    "t1_s": _POS, "t1_mw_s": _POS, "p_shelf_ms1": _PROB, "p_shelf_ms0": _PROB,
    "p_ionize_triplet": _PROB, "p_ionize_singlet": _PROB, "init_polarization": _PROB,
})

SCHEMA = _obj({
    "schema_version": {"type": "string", "pattern": r"^\d+\.\d+$"},
    "seed": {"type": "integer", "minimum": 0},
    "threads": _INT_POS,
    "nanodiamond": _obj(_ENSEMBLE_PROPS),
    "acquisition": _obj({"probe_powers_mW": _POS_LIST, "duration_s": _POS,
                         "n_bins": {"type": "integer", "minimum": 2}, "shots": _INT_POS}),
    "fitting": _obj({"n_max": _INT_POS, "weighted": {"type": "boolean"}}),
    "metrics": _obj({"tau_grid_s": _GRID, "n_fom": _INT_POS}),
    "survey": _obj({"n_items": _INT_POS,
                    "n_nv_range": {"type": "array", "items": _INT_POS, "minItems": 2, "maxItems": 2},
                    "contrast_bins_pct": _GRID, "histogram_bins": _INT_POS}),
    "kmc": _obj({"power_mW": _POS, "duration_s": _POS, "n_traj": _INT_POS,
                 "powers_mW": _POS_LIST, "events_per_power": _INT_POS}),
    "spin": _SPIN,
    "scc": _obj({
        "ensemble": _obj({**_ENSEMBLE_PROPS, "seed": {"type": "integer", "minimum": 0}}),
        "pulses": _obj({"init_power_mW": _POS, "init_duration_s": _POS, "scc_power_mW": _POS,
                        "shelve_s": _POS, "delay_s": _NONNEG, "ionize_s": _POS}),
        "power_grid_mW": _GRID, "tau_grid_s": _GRID,
        "shots_per_point": {"type": "integer", "minimum": 1000},
        "snr_pl": _POS, "tau_r_pl_s": _POS, "tau_w_grid_s": _GRID,
    }),
    "pl_readout": _obj({
        "pl_sat_per_s": _NONNEG, "i_sat_mW": _POS, "contrast_0": _PROB,
        "contrast_roll_power_mW": _POS, "t_pol_sat_s": _POS, "background_per_s": _NONNEG,
        "power_mW": _POS, "duration_s": _POS,
    }),
    "relaxometry": _obj({
        "tau_w_s": _NONNEG, "scc_power_mW": _POS, "scc_duration_s": _POS,
        "scc_overhead_s": _NONNEG, "bandwidths_hz": _GRID,
        "repeats": {"type": "integer", "minimum": 2},
        "protocols": {"type": "array", "items": {"enum": ["PL", "SCC"]}, "minItems": 1},
        "t1_delays_s": _GRID, "t1_shots": _INT_POS,
    }),
    "calibration": _obj({
        "mapping": _obj({"shelve_anchor_s": _POS, "delay_anchor_s": _POS, "ionize_anchor_s": _POS,
                         "shelve_rise_s": _POS, "isc_time_s": _POS}),
        "sweep_shots": _INT_POS, "sweep_probe_power_mW": _POS, "sweep_probe_duration_s": _POS,
        "shelve_grid_s": _GRID, "delay_grid_s": _GRID, "ionize_grid_s": _GRID,
        "pl_power_grid_mW": _GRID, "pl_duration_grid_s": _GRID, "pl_shots": _INT_POS,
        "saturation_powers_mW": _GRID, "saturation_shots": _INT_POS,
    }),
})


# -- loading -----------------------------------------------------------------------------


def default_path() -> Path:
    """Default config file: ``$NDSCC_CONFIG_DIR/default.yaml`` if present, else packaged."""
    env = os.environ.get(CONFIG_DIR_ENV)
    if env:
        p = Path(env) / DEFAULT_NAME
        if p.is_file():
            return p
    return Path(str(resources.files("ndscc") / "data" / DEFAULT_NAME))


def _read_yaml(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse YAML: {exc}", str(path)) from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", str(path))
    return data


def merge(base: dict, over: dict) -> dict:
    """Recursive merge; mappings merge key by key, anything else replaces."""
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(item: str) -> dict:
    """``"a.b.c=value"`` to ``{"a": {"b": {"c": value}}}`` with a YAML-typed value."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key.path=value")
    key, raw = item.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value: {exc}", key) from exc
    out = value
    for p in reversed(parts):
        out = {p: out}
    return out


def check_version(version, where: str = "schema_version") -> None:
    """Reject unknown major versions."""
    major = str(version).split(".")[0]
    if major != SCHEMA_VERSION.split(".")[0]:
        raise ConfigError(f"unsupported schema major version {version!r} "
                          f"(this build reads {SCHEMA_VERSION})", where)


def validate(cfg: dict) -> dict:
    """Schema check plus cross-field rules; returns ``cfg`` unchanged."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        err = errors[0]
        path = ".".join(str(p) for p in err.absolute_path)
        if err.validator == "required":
            missing = [k for k in err.validator_value if k not in err.instance]
            field_ = ".".join(filter(None, [path, missing[0] if missing else ""]))
            raise ConfigError("required field is missing", field_)
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            raise ConfigError("unknown field", ".".join(filter(None, [path, extra[0]])))
        raise ConfigError(err.message, path)
    check_version(cfg["schema_version"])
    lo, hi = cfg["survey"]["n_nv_range"]
    if lo > hi:
        raise ConfigError("lower bound exceeds upper bound", "survey.n_nv_range")
    for key in ("metrics.tau_grid_s", "scc.power_grid_mW", "scc.tau_grid_s", "scc.tau_w_grid_s",
                "relaxometry.bandwidths_hz"):
        g = grid(get(cfg, key), key)
        if np.any(g <= 0) and key != "scc.tau_w_grid_s":
            raise ConfigError("grid values must be > 0", key)
        if np.any(np.diff(g) <= 0):
            raise ConfigError("grid must be strictly ascending", key)
    return cfg


def load(path=None, overrides=()) -> dict:
    """Resolve and validate defaults < file < overrides."""
    cfg = _read_yaml(default_path())
    if path is not None:
        cfg = merge(cfg, _read_yaml(path))
    for item in overrides:
        cfg = merge(cfg, parse_override(item) if isinstance(item, str) else item)
    return validate(cfg)


# -- accessors and builders --------------------------------------------------------------


def get(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


def grid(value, where: str = "") -> np.ndarray:
    """Expand a grid definition (list, or start/stop/num with log or linear spacing)."""
    if isinstance(value, (list, tuple)):
        return np.asarray(value, dtype=float)
    start, stop, num = float(value["start"]), float(value["stop"]), int(value["num"])
    if value.get("spacing", "log") == "log":
        if start <= 0 or stop <= 0:
            raise ConfigError("log grid needs positive bounds", where)
        return np.geomspace(start, stop, num)
    return np.linspace(start, stop, num)


def ensemble_config(section: dict, seed: int) -> EnsembleConfig:
    dists = {name: LogNormal(float(d["median"]), float(d["gsd"]))
             for name, d in section["distributions"].items()}
    return EnsembleConfig(int(section["n_nv"]), dists, int(section.get("seed", seed)),
                          float(section["dark_recombination_per_s"]),
                          float(section["excitation_sat_rate_per_s"]))


def spin_params(cfg: dict) -> SpinParams:
    s = cfg["spin"]
    return SpinParams(float(s["t1_s"]), float(s["t1_mw_s"]), float(s["p_shelf_ms1"]),
                      float(s["p_shelf_ms0"]), float(s["p_ionize_triplet"]),
                      float(s["p_ionize_singlet"]), float(s["init_polarization"]))


def pl_model(cfg: dict) -> PLReadoutModel:
    p = cfg["pl_readout"]
    return PLReadoutModel(float(p["pl_sat_per_s"]), float(p["i_sat_mW"]), float(p["contrast_0"]),
                          float(p["contrast_roll_power_mW"]), float(p["t_pol_sat_s"]),
                          float(p["background_per_s"]))
