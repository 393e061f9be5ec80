"""Named training profiles and JSON persistence of training configurations."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from crowd_mlp.model.config import ConfigurationError, describe_validation_error
from crowd_mlp.training.config import TrainConfig

DEFAULT_PROFILE = "desk"

PROFILES: dict[str, dict[str, Any]] = {
    "tiny": {
        "lr": 1e-3,
        "batch_size": 2,
        "crop_size": 128,
        "epochs": 2,
        "num_scenes": 6,
        "model": {
            "image_size": 128,
            "token_dim": 16,
            "frontend": {"block_channels": [4, 8, 8], "reduced_channels": 8},
        },
        "synth": {"height": 128, "width": 128, "n_min": 5, "n_max": 20},
    },
    "desk": {
        "lr": 1e-3,
        "batch_size": 4,
        "crop_size": 128,
        "epochs": 72,
        "max_steps": 500,
        "num_scenes": 32,
        "model": {
            "image_size": 128,
            "token_dim": 64,
            "batch_renorm": True,
            "count_scale": 10.0,
            "frontend": {"block_channels": [16, 32, 64], "reduced_channels": 32},
        },
        "synth": {"height": 160, "width": 160, "n_min": 20, "n_max": 80},
    },
    "paper": {
        "lr": 1e-5,
        "batch_size": 12,
        "crop_size": 256,
        "epochs": 100,
        "num_scenes": 128,
        "model": {
            "image_size": 256,
            "token_dim": 256,
            "frontend": {"block_channels": [64, 128, 256], "reduced_channels": 128},
        },
        "synth": {"height": 320, "width": 320, "n_min": 50, "n_max": 300},
    },
}


def profile_values(name: str) -> dict[str, Any]:
    if name not in PROFILES:
        raise ConfigurationError(f"Unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return copy.deepcopy(PROFILES[name])


def make_train_config(profile: str = DEFAULT_PROFILE, **overrides: Any) -> TrainConfig:
    """Profile values with ``overrides`` merged on top (nested dicts merge key by key)."""
    values = _merge(profile_values(profile), overrides)
    return validate_train_config(values)


def validate_train_config(values: dict[str, Any]) -> TrainConfig:
    try:
        return TrainConfig.model_validate(values)
    except ValidationError as exc:
        raise ConfigurationError(describe_validation_error(exc)) from exc


def load_train_config(path: str | Path) -> TrainConfig:
    """Read a JSON training config; an optional ``profile`` key supplies the base values."""
    source = Path(path)
    try:
        with open(source, "r", encoding="utf-8") as file:
            data = json.load(file)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"Config file not found: {source}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"Cannot read config file {source}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"Config file {source} must hold a JSON object")

    profile = data.pop("profile", None)
    if profile is None:
        return validate_train_config(data)
    return make_train_config(str(profile), **data)


def save_train_config(cfg: TrainConfig, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8") as file:
        json.dump(cfg.model_dump(mode="json"), file, indent=2)
    return target


def _merge(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged
