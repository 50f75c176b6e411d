"""Run configuration: one JSON file, dotted-key overrides, strict validation.

The configuration is a nested dict with a fixed schema; unknown keys are
rejected so typos fail fast. The canonical echo (sorted, compact JSON)
is embedded in every output so a result file identifies the exact run
that produced it without timestamps or hashes.
"""
from __future__ import annotations

import copy
import json
import os

from .grids import DEFAULT_STEP
from .inference import BASE_INDICATORS

DEFAULTS = {
    "paths": {
        "occurrences": None,
        "statuses": None,
        "stack": None,
        "regions": None,
        "region_catalog": None,
        "pa_regions": None,
        "prior": None,
        "model": None,
        "out": "out",
    },
    "split": {
        "block_size": 0.025,
        "ratios": [0.90, 0.05, 0.05],
        "seed": 0,
    },
    "train": {
        "learning_rate": 0.01,
        "decay_epochs": [50, 65],
        "decay_factor": 0.1,
        "epochs": 80,
        "batch_size": 128,
        "seed": 0,
        "loss": "cross-entropy",
        "margin": 0.5,
        "reweight_start_epoch": 65,
        "retrain_full": False,
        "eval_top_k": 30,
    },
    "epsilon": 0.03,
    "calibration_split": "validation",
    "lambda": None,
    "grid": {
        "lon_range": None,
        "lat_range": None,
        "step": DEFAULT_STEP,
        "drop_antimeridian": False,
    },
    "indicators": list(BASE_INDICATORS),
    "batch_size": 512,
    "buffer_size": 50000,
    "workers": 1,
    "patch_radius": 0,
    "min_region_km2": 2000.0,
    "status_precedence": "assessed",
    "eval_top_k": [1, 5, 30],
    "rank_top_k": 15,
    "explain_points": [],
}


class ConfigError(ValueError):
    """Configuration is malformed or references missing inputs."""


def _merge(base, update, path=""):
    for key, value in update.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here!r} must be an object")
            _merge(base[key], value, here)
        else:
            base[key] = value


def parse_override(text):
    """Parse one ``key=value`` override; values are JSON when they parse."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_override(cfg, key, value):
    parts = key.split(".")
    node = cfg
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown configuration key {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown configuration key {key!r}")
    node[parts[-1]] = value


def load_config(path=None, overrides=(), out=None):
    """Load defaults, the optional JSON file, then overrides in order."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        _merge(cfg, user)
    for item in overrides:
        key, value = parse_override(item)
        apply_override(cfg, key, value)
    if out is not None:
        cfg["paths"]["out"] = out
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    """Structural checks that need no input files."""
    ratios = cfg["split"]["ratios"]
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ConfigError(f"split.ratios must be three non-negative numbers summing to 1, got {ratios}")
    if cfg["split"]["block_size"] <= 0:
        raise ConfigError("split.block_size must be positive")
    if not 0.0 <= cfg["epsilon"] <= 1.0:
        raise ConfigError(f"epsilon must be in [0, 1], got {cfg['epsilon']}")
    if cfg["calibration_split"] not in ("train", "validation", "test"):
        raise ConfigError(f"calibration_split must be train/validation/test, got {cfg['calibration_split']!r}")
    if cfg["lambda"] is not None and not 0.0 <= cfg["lambda"] <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1], got {cfg['lambda']}")
    if cfg["batch_size"] < 1 or cfg["buffer_size"] < 1:
        raise ConfigError("batch_size and buffer_size must be at least 1")
    if cfg["workers"] < 1:
        raise ConfigError("workers must be at least 1")
    if cfg["patch_radius"] < 0:
        raise ConfigError("patch_radius must be non-negative")
    if cfg["status_precedence"] not in ("assessed", "predicted"):
        raise ConfigError(f"status_precedence must be assessed/predicted, got {cfg['status_precedence']!r}")
    if cfg["rank_top_k"] < 1:
        raise ConfigError("rank_top_k must be at least 1")
    grid = cfg["grid"]
    for axis in ("lon_range", "lat_range"):
        rng = grid[axis]
        if rng is not None and (len(rng) != 2 or rng[1] <= rng[0]):
            raise ConfigError(f"grid.{axis} must be [low, high] with high > low")
    if grid["step"] <= 0:
        raise ConfigError("grid.step must be positive")
    for point in cfg["explain_points"]:
        if len(point) != 2:
            raise ConfigError(f"explain_points entries must be [lon, lat], got {point}")


def require_paths(cfg, *keys):
    """Check that the named input paths are configured and exist."""
    for key in keys:
        value = cfg["paths"].get(key)
        if not value:
            raise ConfigError(f"paths.{key} is required for this command")
        if not os.path.exists(value):
            raise ConfigError(f"paths.{key}: no such file: {value}")


def canonical_echo(cfg):
    """Stable one-line JSON used as the provenance stamp."""
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))
