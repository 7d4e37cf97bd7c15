"""Run configuration: presets, YAML files and dotted command-line overrides."""
from __future__ import annotations

import copy
import os
from pathlib import Path
from typing import Any

import yaml

from .matcher import ConfigurationError

WORKSPACE_ENV = "DEMORPH_HOME"

DESK: dict[str, Any] = {
    "seed": 0,
    "data": {
        "pool": None,
        "synthetic": True,
        "n_identities": 24,
        "n_train": 16,
        "n_test": 8,
        "n_cross": 0,
        "resolution": 64,
        "alpha": 0.5,
        "train_fraction": 0.6,
        "unique_pairs": False,
        "workers": 1,
    },
    "model": {"base_width": 32, "depth": 3, "time_embed_dim": 128, "res_blocks": 1, "attention": True},
    "diffusion": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "train": {"epochs": 300, "lr": 1e-3, "batch_size": 8, "checkpoint_every": 10, "ema_decay": None,
              "noise_draws": 1},
    "sampler": {"steps": 100, "clip": True, "variance": "posterior", "batch_size": 8, "split": "test"},
    "matcher": {"name": "toy", "model_path": None, "dimension": 64},
    "eval": {"fmr_levels": [0.01, 0.05, 0.1], "ra_threshold": 0.4, "theta": 0.4, "epsilon": 0.4,
             "split": "test", "tau": None},
}

PAPER_FAITHFUL: dict[str, Any] = copy.deepcopy(DESK)
PAPER_FAITHFUL["data"].update({"synthetic": False, "resolution": 256, "n_train": 15000, "n_test": 0})
PAPER_FAITHFUL["model"].update({"base_width": 64, "depth": 5, "time_embed_dim": 256})
PAPER_FAITHFUL["train"].update({"epochs": 300})
PAPER_FAITHFUL["matcher"].update({"name": "arcface", "dimension": 512})

PRESETS = {"desk": DESK, "paper-faithful": PAPER_FAITHFUL}


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    """Split ``a.b.c=value``; the value is parsed as YAML so numbers and null work."""
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def load_config(path=None, preset: str = "desk", overrides=()) -> dict:
    """Preset, then the YAML file at ``path``, then ``key=value`` overrides."""
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    config = copy.deepcopy(PRESETS[preset])
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{path} must hold a mapping")
        config = merge(config, loaded)
    for item in overrides:
        keys, value = parse_override(item)
        node = config
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"cannot set {item!r}: {k} is not a section")
        node[keys[-1]] = value
    config["preset"] = preset
    return config


def default_workspace() -> Path:
    return Path(os.environ.get(WORKSPACE_ENV, "demorph-runs"))


def dump(config: dict) -> str:
    return yaml.safe_dump(config, sort_keys=True)
