"""Strict TOML experiment configuration.

A config file has top-level ``kind``, ``seed`` and optional ``out``, a
``[grid]`` table (dt, delay_steps, horizon_steps), a ``[model]`` table with
``id`` and an optional ``[model.params]`` table, and a per-kind ``[params]``
table.  Unknown keys anywhere fail fast with the offending name: silent
typos in experiment definitions are worse than a rerun.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .core import TimeGrid

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "parse_config_text", "KINDS"]

KINDS = (
    "simulate",
    "couple",
    "approx-study",
    "support-probe",
    "ergodic",
    "sensitivity",
    "tailcheck",
)


class ConfigError(ValueError):
    """A config file failed strict validation; the message names the field."""


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seed: int
    out: Optional[str]
    grid: TimeGrid
    model_id: Optional[str]
    model_params: Dict[str, Any] = field(default_factory=dict)
    params: Dict[str, Any] = field(default_factory=dict)
    source_sha256: str = ""


_NUMBER = (int, float)


def _type_name(spec):
    if spec is bool:
        return "bool"
    if spec is int:
        return "int"
    if spec == _NUMBER:
        return "number"
    if spec is str:
        return "string"
    if spec is list:
        return "list of numbers"
    return str(spec)


def _check_type(key, value, spec):
    if spec is bool:
        ok = isinstance(value, bool)
    elif spec is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif spec == _NUMBER:
        ok = isinstance(value, _NUMBER) and not isinstance(value, bool)
    elif spec is str:
        ok = isinstance(value, str)
    elif spec is list:
        ok = isinstance(value, list) and all(
            isinstance(v, _NUMBER) and not isinstance(v, bool) for v in value
        )
    else:  # pragma: no cover - schema bug
        raise AssertionError(spec)
    if not ok:
        raise ConfigError(f"params.{key} must be a {_type_name(spec)}, got {value!r}")
    return value


# key -> (type spec, default); default None with no entry means required
_COMMON_PATH_KEYS = {"paths": (int, 1000)}

_PARAM_SCHEMAS = {
    "simulate": {"paths": (int, 1), "init_level": (_NUMBER, 1.0)},
    "couple": {
        "mode": (str, "controlled"),
        "paths": (int, 1000),
        "init_level_x": (_NUMBER, 0.0),
        "init_level_y": (_NUMBER, 0.01),
        "gamma": (_NUMBER, 0.4),
        "threshold_mult": (_NUMBER, 2.0),
        "with_ledger": (bool, True),
        "theta": (_NUMBER, 0.5),
    },
    "approx-study": {
        "paths": (int, 400),
        "gamma": (_NUMBER, 0.4),
        "eps_values": (list, None),
        "init_level": (_NUMBER, 0.0),
    },
    "support-probe": {
        "paths": (int, 1000),
        "lam": (_NUMBER, 50.0),
        "delta": (_NUMBER, 0.25),
        "init_level": (_NUMBER, 0.5),
        "target_level": (_NUMBER, -0.25),
    },
    "ergodic": {
        "n_samples": (int, 128),
        "times": (list, None),
        "spacing": (_NUMBER, 2.0),
        "burn_in": (_NUMBER, 10.0),
        "metric_n": (_NUMBER, 1.0),
        "metric_gamma": (_NUMBER, 1.0),
        "init_level": (_NUMBER, 4.0),
        "bootstrap": (int, 32),
    },
    "sensitivity": {
        "paths": (int, 10000),
        "lam_values": (list, None),
        "t_values": (list, None),
        "z_level": (_NUMBER, 1.0),
        "init_level": (_NUMBER, 1.0),
        "f_id": (str, "endpoint"),
        "fd_eps": (_NUMBER, 0.0),
    },
    "tailcheck": {
        "driver": (str, "sq-ou"),
        "paths": (int, 10000),
        "r_values": (list, None),
        "delta": (_NUMBER, 0.25),
        "theta": (_NUMBER, 1.0),
        "noise_scale": (_NUMBER, 1.0),
        "x0": (_NUMBER, 0.5),
        "x_cap": (_NUMBER, 2.0),
        "v0": (_NUMBER, 0.25),
        "a_offset": (_NUMBER, 1.0),
        "lam_decay": (_NUMBER, 2.0),
    },
}

_TAILCHECK_BY_DRIVER = {
    "sq-ou": {"driver", "paths", "r_values", "delta", "theta", "noise_scale", "x0", "x_cap"},
    "drift-only": {"driver", "paths", "r_values", "delta", "v0", "a_offset", "lam_decay"},
}

_MODEL_FREE_KINDS = {"tailcheck"}


def _as_table(raw, name):
    value = raw.get(name)
    if value is None:
        raise ConfigError(f"missing required table [{name}]")
    if not isinstance(value, dict):
        raise ConfigError(f"[{name}] must be a table")
    return value


def _parse_grid(raw):
    table = _as_table(raw, "grid")
    unknown = set(table) - {"dt", "delay_steps", "horizon_steps"}
    if unknown:
        raise ConfigError(f"unknown key grid.{sorted(unknown)[0]}")
    for key in ("dt", "delay_steps", "horizon_steps"):
        if key not in table:
            raise ConfigError(f"missing required key grid.{key}")
    dt = table["dt"]
    if not isinstance(dt, _NUMBER) or isinstance(dt, bool) or not dt > 0:
        raise ConfigError(f"grid.dt must be a positive number, got {dt!r}")
    for key in ("delay_steps", "horizon_steps"):
        v = table[key]
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ConfigError(f"grid.{key} must be a positive integer, got {v!r}")
    return TimeGrid(float(dt), table["delay_steps"], table["horizon_steps"])


def _parse_params(kind, raw):
    schema = _PARAM_SCHEMAS[kind]
    table = raw.get("params", {})
    if not isinstance(table, dict):
        raise ConfigError("[params] must be a table")
    unknown = set(table) - set(schema)
    if unknown:
        raise ConfigError(f"unknown key params.{sorted(unknown)[0]} for kind {kind!r}")
    params = {}
    for key, (spec, default) in schema.items():
        if key in table:
            params[key] = _check_type(key, table[key], spec)
        elif default is None:
            raise ConfigError(f"missing required key params.{key} for kind {kind!r}")
        else:
            params[key] = default
    if kind == "tailcheck":
        driver = params["driver"]
        if driver not in _TAILCHECK_BY_DRIVER:
            raise ConfigError(f"params.driver must be one of {sorted(_TAILCHECK_BY_DRIVER)}, got {driver!r}")
        allowed = _TAILCHECK_BY_DRIVER[driver]
        stray = set(table) - allowed
        if stray:
            raise ConfigError(
                f"unknown key params.{sorted(stray)[0]} for tailcheck driver {driver!r}"
            )
        params = {k: v for k, v in params.items() if k in allowed}
    return params


def _parse_model(kind, raw):
    if "model" not in raw:
        if kind in _MODEL_FREE_KINDS:
            return None, {}
        raise ConfigError("missing required table [model]")
    table = _as_table(raw, "model")
    unknown = set(table) - {"id", "params"}
    if unknown:
        raise ConfigError(f"unknown key model.{sorted(unknown)[0]}")
    if "id" not in table or not isinstance(table["id"], str):
        raise ConfigError("model.id must be a string")
    mp = table.get("params", {})
    if not isinstance(mp, dict):
        raise ConfigError("[model.params] must be a table")
    for key, value in mp.items():
        if isinstance(value, bool) or not isinstance(value, _NUMBER):
            raise ConfigError(f"model.params.{key} must be a number, got {value!r}")
    return table["id"], dict(mp)


def parse_config_text(text: str, source_sha256: str = "") -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    unknown = set(raw) - {"kind", "seed", "out", "grid", "model", "params"}
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r}")
    kind = raw.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {', '.join(KINDS)}; got {kind!r}")
    seed = raw.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    out = raw.get("out")
    if out is not None and not isinstance(out, str):
        raise ConfigError("out must be a string path")
    grid = _parse_grid(raw)
    model_id, model_params = _parse_model(kind, raw)
    params = _parse_params(kind, raw)
    return ExperimentConfig(
        kind=kind,
        seed=seed,
        out=out,
        grid=grid,
        model_id=model_id,
        model_params=model_params,
        params=params,
        source_sha256=source_sha256,
    )


def parse_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_config_text(data.decode("utf-8"), hashlib.sha256(data).hexdigest())
