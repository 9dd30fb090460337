"""Run configuration: one YAML document with nested blocks, validated against a
JSON schema (unknown keys are rejected) and merged over documented defaults."""
from __future__ import annotations

import copy
from pathlib import Path

import jsonschema
import yaml

from stackop.errors import ConfigError

DEFAULTS: dict = {
    "horizon": {"T": 1.0, "M": 256, "d": 1},
    "ensemble": {"P": 100000, "seed": 0},
    "game": {"name": "scalar_quadratic", "params": {}},
    "basis": {"n_check": 16, "d_enc": 8, "d1": 8, "sigma_tol": 3.0, "floor": 1e-12, "max_se": 0.01},
    "operator": {"N": 16, "Q": 8, "J": 3, "W": 32, "activation": "standard", "seed": 0},
    "solver": {"max_iters": 500, "step_rule": "backtracking", "step_size": 0.5, "grad_tol": 1e-8, "restarts": 1},
    "training": {
        "mode": "supervised",
        "epochs": 200,
        "batch_size": 16,
        "lr": 0.01,
        "lr_final": None,
        "momentum": 0.9,
        "optimizer": "momentum",
        "seed": 0,
        "eval_controls": 16,
        "param_radius": 1000.0,
        "leader_lr": 0.1,
        "leader_steps": 1,
        "leader_weight": 0.0,
        "divergence": 1.0e6,
        "n_train": 64,
        "sup_error_rel": 0.05,
        "resume": False,
    },
    "compact_set": {"variant": "holder", "alpha": 0.5, "bound": 1.0, "knots": 9, "C": 1.0, "r": 0.5, "n_terms": 8, "lipschitz": 1.0, "cap": 1.0},
    "best_response": {"pairs": 20, "seed": 0, "scale_min": 0.01, "scale_max": 0.1, "extra_tol": 1e-4, "min_slope": 0.4},
    "certify": {"probes": 64, "threshold": 0.05, "gap_threshold": 0.05, "checkpoint": None, "seed": 1},
    "counterexample": {"grid": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0], "G": 10000},
    "sim": {"leader": "zero", "follower": "zero", "seed": 2},
    "outputs": {"directory": "out"},
}

_num = {"type": "number"}
_int = {"type": "integer"}
_pos_int = {"type": "integer", "minimum": 1}
_pos = {"type": "number", "exclusiveMinimum": 0}


def _block(props: dict, required=()) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props, "required": list(required)}


SCHEMA = _block(
    {
        "horizon": _block({"T": _pos, "M": _pos_int, "d": _pos_int}),
        "ensemble": _block({"P": _pos_int, "seed": {"type": "integer", "minimum": 0}}),
        "game": _block({"name": {"type": "string"}, "params": {"type": "object"}}),
        "basis": _block({"n_check": _pos_int, "d_enc": _pos_int, "d1": _pos_int, "sigma_tol": _pos, "floor": {"type": "number", "minimum": 0}, "max_se": _pos}),
        "operator": _block(
            {
                "N": _pos_int,
                "Q": _pos_int,
                "J": _pos_int,
                "W": _pos_int,
                "activation": {"enum": ["standard", "superexpressive", "relu"]},
                "seed": _int,
            }
        ),
        "solver": _block(
            {
                "max_iters": _pos_int,
                "step_rule": {"enum": ["backtracking", "fixed"]},
                "step_size": _pos,
                "grad_tol": _pos,
                "restarts": _pos_int,
            }
        ),
        "training": _block(
            {
                "mode": {"enum": ["supervised", "unsupervised"]},
                "epochs": _pos_int,
                "batch_size": _pos_int,
                "lr": _pos,
                "lr_final": {"anyOf": [_pos, {"type": "null"}]},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "optimizer": {"enum": ["momentum", "adam"]},
                "seed": _int,
                "eval_controls": _pos_int,
                "param_radius": _pos,
                "leader_lr": _pos,
                "leader_steps": _pos_int,
                "leader_weight": {"type": "number", "minimum": 0},
                "divergence": _pos,
                "n_train": _pos_int,
                "sup_error_rel": _pos,
                "resume": {"type": "boolean"},
            }
        ),
        "compact_set": _block(
            {
                "variant": {"enum": ["holder", "exp_ellipsoid", "lipschitz"]},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "bound": {"type": "number", "minimum": 0},
                "knots": {"type": "integer", "minimum": 2},
                "C": {"type": "number", "minimum": 0},
                "r": _pos,
                "n_terms": _pos_int,
                "lipschitz": {"type": "number", "minimum": 0},
                "cap": _pos,
            }
        ),
        "best_response": _block(
            {"pairs": _pos_int, "seed": _int, "scale_min": _pos, "scale_max": _pos, "extra_tol": {"type": "number", "minimum": 0}, "min_slope": _num}
        ),
        "certify": _block(
            {
                "probes": _pos_int,
                "threshold": _pos,
                "gap_threshold": _pos,
                "checkpoint": {"type": ["string", "null"]},
                "seed": _int,
            }
        ),
        "counterexample": _block({"grid": {"type": "array", "items": _num, "minItems": 1}, "G": _pos_int}),
        "sim": _block({"leader": {"enum": ["zero", "sample"]}, "follower": {"enum": ["zero", "best_response"]}, "seed": _int}),
        "outputs": _block({"directory": {"type": "string"}}),
    }
)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "params":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(doc: dict) -> dict:
    """Validate a (partial) config document and return it merged over the defaults."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping of blocks")
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    cfg = _merge(DEFAULTS, doc)
    if cfg["best_response"]["scale_min"] > cfg["best_response"]["scale_max"]:
        raise ConfigError("best_response.scale_min must not exceed scale_max")
    M = cfg["horizon"]["M"]
    if M < 2 or M & (M - 1):
        raise ConfigError(f"horizon.M must be a power of two >= 2, got {M}")
    return cfg


def load(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from None
    return validate(doc)


def dump(cfg: dict, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)
