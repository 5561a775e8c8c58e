"""Experiment configuration: JSON schema, per-problem defaults, resolution.

A config names a problem, a model and an optimizer. Everything left out
is filled from :data:`DEFAULTS` (shared) and :data:`PROBLEM_DEFAULTS`
(per problem type), so the resolved document is complete and can be
embedded in the run output.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema

__all__ = [
    "ConfigError",
    "DEFAULTS",
    "PROBLEM_DEFAULTS",
    "SCHEMA",
    "bundled_configs",
    "config_hash",
    "load_config",
    "resolve_config",
]

SCHEMA_VERSION = 1

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_pos_or_null = {"anyOf": [_pos, {"type": "null"}]}
_int_pos = {"type": "integer", "minimum": 1}

_stop = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "tol_abs": _pos_or_null,
        "sat_abs": _pos_or_null,
        "sat_rel": _pos_or_null,
        "lookback": _int_pos,
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ngflow experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["problem", "model", "optimizer"],
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "problem": {
            "type": "object",
            "required": ["type"],
            "additionalProperties": False,
            "properties": {
                "type": {"enum": ["sl", "ritz", "burgers_mor"]},
                "k": _pos,
                "n_train": _int_pos,
                "n_test": _int_pos,
                "n_nodes": {"type": "integer", "minimum": 2},
                "n_batches": _int_pos,
                "data_seed": {"type": "integer", "minimum": 0},
            },
        },
        "model": {
            "type": "object",
            "required": ["widths"],
            "additionalProperties": False,
            "properties": {
                "widths": {"type": "array", "items": _int_pos, "minItems": 1},
                "activation": {"enum": ["tanh"]},
                "init_seed": {"anyOf": [{"type": "integer", "minimum": 0}, {"type": "null"}]},
            },
        },
        "optimizer": {"enum": ["ngf", "adam", "expansive"]},
        "ngf": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "gamma0": _pos,
                "armijo_c": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "max_halvings": {"type": "integer", "minimum": 0},
                "max_epochs": _int_pos,
                "diag_cap": _pos_or_null,
                "lambda_table": {
                    "anyOf": [
                        {"enum": ["default", "mor"]},
                        {
                            "type": "object",
                            "required": ["thresholds", "values"],
                            "additionalProperties": False,
                            "properties": {
                                "thresholds": {"type": "array", "items": _num},
                                "values": {"type": "array", "items": _pos},
                            },
                        },
                    ]
                },
            },
        },
        "adam": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tau0": _pos,
                "decay_rate": {"type": "number", "minimum": 0},
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "eps": _pos,
                "max_iters": _int_pos,
            },
        },
        "stop": _stop,
        "adam_stop": _stop,
        "expansion": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_expansions": {"type": "integer", "minimum": 0},
                "new_width": {"anyOf": [_int_pos, {"type": "null"}]},
                "init_method": {"enum": ["random", "gradient_aligned"]},
                "K": _int_pos,
                "alpha0": _pos,
                "random_scale": {"type": "number", "minimum": 0},
                "drop_tol": _pos,
                "basis": {"enum": ["full", "xi"]},
                "term_abs": _pos_or_null,
                "term_rel": _pos_or_null,
                "max_total_iters": _int_pos,
            },
        },
    },
}

DEFAULTS = {
    "name": "experiment",
    "seed": 0,
    "output_dir": "runs",
    "model": {"activation": "tanh", "init_seed": None},
    "ngf": {
        "gamma0": 10.0,
        "armijo_c": 2e-4,
        "max_halvings": 40,
        "max_epochs": 1000,
        "diag_cap": None,
        "lambda_table": "default",
    },
    "adam": {
        "tau0": 5e-3,
        "decay_rate": 1e-8,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "max_iters": 10000,
    },
    "expansion": {
        "max_expansions": 6,
        "new_width": None,
        "init_method": "gradient_aligned",
        "K": 20,
        "alpha0": 1e-3,
        "random_scale": 0.5,
        "drop_tol": 1e-10,
        "basis": "full",
        "term_abs": None,
        "term_rel": None,
        "max_total_iters": 3000,
    },
}

# Stopping rules follow the experiments: supervised problems stop on an
# absolute tolerance; the Poisson problem (unknown optimum) on saturation.
# For fixed-depth supervised runs saturation is off (``stop_fixed``).
PROBLEM_DEFAULTS = {
    "sl": {
        "problem": {"k": 5, "n_train": 201, "n_test": 301, "n_batches": 1, "data_seed": 0},
        "stop": {"tol_abs": 1e-5, "sat_abs": 1e-7, "sat_rel": 5e-3, "lookback": 5},
        "stop_fixed": {"tol_abs": 1e-5, "sat_abs": None, "sat_rel": None, "lookback": 5},
        "adam_stop": {"tol_abs": 1e-5, "sat_abs": 1e-8, "sat_rel": 5e-4, "lookback": 5},
        "ngf": {"lambda_table": "default"},
        "expansion": {},
    },
    "ritz": {
        "problem": {"k": 5, "n_nodes": 401, "n_test": 301},
        "stop": {"tol_abs": None, "sat_abs": 1e-8, "sat_rel": 5e-5, "lookback": 5},
        "stop_fixed": {"tol_abs": None, "sat_abs": 1e-8, "sat_rel": 5e-5, "lookback": 5},
        "adam_stop": {"tol_abs": None, "sat_abs": 1e-9, "sat_rel": 5e-6, "lookback": 5},
        "ngf": {"lambda_table": "default"},
        "expansion": {"term_abs": 5e-3, "term_rel": 1e-6},
    },
    "burgers_mor": {
        "problem": {"data_seed": 0},
        "stop": {"tol_abs": 1e-5, "sat_abs": 1e-7, "sat_rel": 5e-3, "lookback": 5},
        "stop_fixed": {"tol_abs": 1e-5, "sat_abs": None, "sat_rel": None, "lookback": 5},
        "adam_stop": {"tol_abs": 1e-5, "sat_abs": 1e-8, "sat_rel": 5e-4, "lookback": 5},
        "ngf": {"lambda_table": "mor"},
        "expansion": {"max_expansions": 6},
    },
}


class ConfigError(ValueError):
    """Invalid configuration; ``messages`` holds one diagnostic per problem."""

    def __init__(self, messages: list[str]):
        self.messages = list(messages)
        super().__init__("\n".join(self.messages))


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _line_of(text: str, key: str) -> Optional[int]:
    needle = json.dumps(key) + ":"
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line.replace('" :', '":'):
            return i
    return None


def _validate(doc, text: str = "") -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if not errors:
        return
    messages = []
    for err in errors:
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        line = None
        if err.absolute_path:
            last = [p for p in err.absolute_path if isinstance(p, str)]
            if last:
                line = _line_of(text, last[-1])
        where = f"line {line}, " if line else ""
        messages.append(f"{where}field {path}: {err.message}")
    raise ConfigError(messages)


def resolve_config(doc: dict, seed: Optional[int] = None) -> dict:
    """Validate ``doc`` and fill in every default.

    ``seed`` overrides the config seed; otherwise the ``NGFLOW_SEED``
    environment variable does, if set.
    """
    _validate(doc)
    ptype = doc["problem"]["type"]
    pdef = PROBLEM_DEFAULTS[ptype]
    fixed = doc["optimizer"] != "expansive"
    base = _merge(DEFAULTS, {
        "problem": pdef["problem"],
        "ngf": pdef["ngf"],
        "expansion": pdef["expansion"],
        "stop": pdef["stop_fixed"] if fixed else pdef["stop"],
        "adam_stop": pdef["adam_stop"],
    })
    out = _merge(base, doc)
    if seed is None and os.environ.get("NGFLOW_SEED", "").strip():
        try:
            seed = int(os.environ["NGFLOW_SEED"])
        except ValueError:
            raise ConfigError([f"NGFLOW_SEED must be an integer, got {os.environ['NGFLOW_SEED']!r}"])
    if seed is not None:
        if seed < 0:
            raise ConfigError(["seed must be nonnegative"])
        out["seed"] = int(seed)
    if out["model"].get("init_seed") is None:
        out["model"]["init_seed"] = out["seed"]
    _validate(out)
    return out


def bundled_configs() -> dict[str, Path]:
    root = resources.files("ngflow") / "configs"
    return {p.name: Path(str(p)) for p in root.iterdir() if p.name.endswith(".json")}


def find_config(name_or_path) -> Path:
    """A path, or the name of a bundled config (with or without ``.json``)."""
    p = Path(name_or_path)
    if p.exists():
        return p
    bundled = bundled_configs()
    key = p.name if p.name.endswith(".json") else p.name + ".json"
    if key in bundled:
        return bundled[key]
    raise FileNotFoundError(f"no config file or bundled config named {name_or_path!r}")


def load_config(path, seed: Optional[int] = None) -> dict:
    """Read, validate and resolve a config file."""
    path = find_config(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"line {exc.lineno}, column {exc.colno}: {exc.msg}"]) from None
    _validate(doc, text)
    return resolve_config(doc, seed)


def config_hash(cfg: dict) -> str:
    canon = json.dumps({k: v for k, v in cfg.items() if k != "output_dir"},
                       sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
