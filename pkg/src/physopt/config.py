"""Experiment configuration: a nested YAML file validated against a fixed schema.

Every key has a default, so an empty file is a valid config.  Unknown keys
are rejected, and ``section.key=value`` overrides (YAML-parsed values) are
applied after loading.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .errors import ConfigError

FAMILIES = ("helmholtz", "poisson", "nlrd")

DEFAULTS = {
    "family": "poisson",
    "seed": 0,
    "output_dir": "runs/default",
    "dataset": {"path": None, "n": 250, "train_fraction": 0.8},
    "basis": {"kind": "bspline", "n_terms": 32, "degree": 3, "knot_config": "shifted"},
    "basis_t": {"kind": "bspline", "n_terms": 20, "degree": 3, "knot_config": "shifted"},
    "model": {
        "arch": "fno",
        "width": 64,
        "modes": 16,
        "depth": 3,
        "grad_transform": "asinh",
        "scale_mode": "fixed",
        "gamma_fourier": 0,
        "checkpoint": None,
        "inputs": {"grad": True, "gamma": True, "g": True, "f": True, "coords": True},
    },
    "solver": {
        "L": 2,
        "eta": 1.0,
        "theta0_init": "zeros",
        "theta0_sigma": 0.01,
        "update_rule": "gd",
        "lambda_bc": 1.0,
    },
    "train": {
        "epochs": 750,
        "batch_size": 20,
        "lr": 1e-3,
        "lr_decay": 0.995,
        "delta": 1.0,
        "eval_every": 50,
        "abort_fraction": 0.5,
        "second_order": False,
    },
    "infer": {"instance": None},
    "bench": {
        "n_instances": 20,
        "steps": 10000,
        "optimizers": ["sgd", "adam", "lbfgs"],
        "adam_lr": 1e-2,
        "sgd_lr": None,
        "record_every": 1,
    },
    "conditioning": {"K": [4, 8, 16], "eps": [1e-3], "lambda_bc": 1.0, "c": 0.5, "cap": 10000000},
    "landscape": {
        "loss": "pde",
        "basis": "hessian",
        "res": 41,
        "extent": 1.5,
        "instance_index": 0,
    },
}

_TYPES = {
    "family": str, "seed": int, "output_dir": str,
}


def _merge(base: dict, update: dict, path=""):
    for key, val in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            _merge(base[key], val, where + ".")
        else:
            base[key] = val


def _validate(cfg: dict):
    if cfg["family"] not in FAMILIES:
        raise ConfigError(f"family must be one of {FAMILIES}, got {cfg['family']!r}")
    for key, typ in _TYPES.items():
        if not isinstance(cfg[key], typ) or isinstance(cfg[key], bool):
            raise ConfigError(f"{key!r} must be of type {typ.__name__}")
    ints = [("dataset", "n"), ("solver", "L"), ("train", "epochs"), ("train", "batch_size"),
            ("bench", "n_instances"), ("bench", "steps"), ("landscape", "res"),
            ("model", "gamma_fourier")]
    for sec, key in ints:
        v = cfg[sec][key]
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            raise ConfigError(f"{sec}.{key} must be a non-negative integer")
    for sec, key in [("solver", "eta"), ("train", "lr"), ("landscape", "extent")]:
        v = cfg[sec][key]
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
            raise ConfigError(f"{sec}.{key} must be a positive number")
    if cfg["solver"]["L"] < 1:
        raise ConfigError("solver.L must be >= 1")
    if not 0.0 <= float(cfg["dataset"]["train_fraction"]) <= 1.0:
        raise ConfigError("dataset.train_fraction must lie in [0, 1]")
    if cfg["landscape"]["loss"] not in ("pde", "data"):
        raise ConfigError("landscape.loss must be 'pde' or 'data'")
    if cfg["landscape"]["basis"] not in ("hessian", "gram_schmidt"):
        raise ConfigError("landscape.basis must be 'hessian' or 'gram_schmidt'")
    if cfg["model"]["grad_transform"] not in ("linear", "asinh", "normalize"):
        raise ConfigError("model.grad_transform must be 'linear', 'asinh' or 'normalize'")
    if cfg["model"]["scale_mode"] not in ("fixed", "instance"):
        raise ConfigError("model.scale_mode must be 'fixed' or 'instance'")
    if not isinstance(cfg["train"]["second_order"], bool):
        raise ConfigError("train.second_order must be true or false")
    bad = set(cfg["bench"]["optimizers"]) - {"sgd", "adam", "lbfgs"}
    if bad:
        raise ConfigError(f"unknown bench optimizers {sorted(bad)}")


def parse_override(text: str):
    """``"a.b=value"`` -> ``(["a", "b"], parsed value)``."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from None
    return key.strip().split("."), value


def nested(keys, value) -> dict:
    out = value
    for k in reversed(keys):
        out = {k: out}
    return out


def load_config(path=None, overrides=(), updates=None) -> dict:
    """Defaults, then the YAML file, then ``updates`` (a nested dict), then overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a mapping")
        _merge(cfg, data)
    if updates:
        _merge(cfg, updates)
    for item in overrides:
        keys, value = parse_override(item)
        _merge(cfg, nested(keys, value))
    _validate(cfg)
    return cfg


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)
