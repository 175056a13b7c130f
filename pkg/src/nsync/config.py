"""Run configuration: JSON files merged over fully materialised defaults."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict
from pathlib import Path

from nsync.diffusion import DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_DDIM_STEPS, DEFAULT_T, make_linear_schedule
from nsync.errors import ConfigError
from nsync.model import DenoiserConfig
from nsync.styleworld import WorldConfig
from nsync.trainer import ALL_VARIANTS, PretrainConfig, TrainConfig


def default_config() -> dict:
    return {
        "seed": 0,
        "world": WorldConfig().as_dict(),
        "data": {
            "target_style": "targetB",
            "n_positives": 137,
            "n_test": 137,
            "positives_seed": 11,
            "test_seed": 12,
        },
        "model": asdict(DenoiserConfig()),
        "schedule": {"T": DEFAULT_T, "beta_min": DEFAULT_BETA_MIN, "beta_max": DEFAULT_BETA_MAX},
        "pretrain": asdict(PretrainConfig()),
        "negatives": {
            "n_per_caption": 1,
            "seed": 13,
            "ddim_steps": DEFAULT_DDIM_STEPS,
            "regenerate_every": 0,
        },
        "train": asdict(TrainConfig()),
        "eval": {
            "extractor_seed": 0,
            "d_f": 32,
            "extractor_hidden": 64,
            "ddim_steps": DEFAULT_DDIM_STEPS,
            "sample_seed": 1000,
            "cmmd_sigma": None,
            "kid_blocks": None,
        },
        "ablate": {
            "seeds": list(range(10)),
            "variants": [v.value for v in ALL_VARIANTS],
            "extra_targets": ["targetA"],
        },
    }


def _merge(base: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "world":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where)
        elif key == "world":
            if not isinstance(value, dict):
                raise ConfigError("config key 'world' must be an object")
            merged = dict(base[key])
            for k, v in value.items():
                if k not in merged:
                    raise ConfigError(f"unknown config key 'world.{k}'")
                merged[k] = v
            out[key] = merged
        else:
            out[key] = value
    return out


def validate(cfg: dict) -> dict:
    """Build every typed config once so bad values fail before any work starts."""
    try:
        world = WorldConfig.from_dict(cfg["world"])
        DenoiserConfig(**cfg["model"])
        PretrainConfig.from_dict(cfg["pretrain"])
        TrainConfig.from_dict(cfg["train"])
        make_linear_schedule(cfg["schedule"]["T"], cfg["schedule"]["beta_min"], cfg["schedule"]["beta_max"])
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    if cfg["model"]["d_data"] != world.d_data:
        raise ConfigError(f"model.d_data={cfg['model']['d_data']} does not match the world grid ({world.d_data})")
    world.style(cfg["data"]["target_style"])
    for name in cfg["ablate"]["extra_targets"]:
        world.style(name)
    if cfg["data"]["n_positives"] < 2 or cfg["data"]["n_test"] < 2:
        raise ConfigError("need at least two positives and two test samples")
    if cfg["negatives"]["n_per_caption"] < 1:
        raise ConfigError("negatives.n_per_caption must be at least 1")
    if cfg["eval"]["ddim_steps"] > cfg["schedule"]["T"] or cfg["negatives"]["ddim_steps"] > cfg["schedule"]["T"]:
        raise ConfigError("DDIM steps exceed the schedule length")
    return cfg


def resolve(user: dict | None = None) -> dict:
    return validate(_merge(default_config(), user or {}))


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return resolve()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        user = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return resolve(user)


def world_of(cfg: dict) -> WorldConfig:
    return WorldConfig.from_dict(cfg["world"])


def schedule_of(cfg: dict):
    s = cfg["schedule"]
    return make_linear_schedule(s["T"], s["beta_min"], s["beta_max"])
