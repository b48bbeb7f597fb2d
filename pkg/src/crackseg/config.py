"""Flat ``section.key = value`` run configuration.

Every key has a default; an empty file reproduces the published settings.
``--tiny`` swaps in the desk-scale preset before the file is applied, and
explicit CLI flags win over both.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any

DEFAULTS: dict[str, Any] = {
    "data.input_size": 256,
    "data.patch_size": 100,
    "data.crack_frac": 0.09,
    "data.split_ratios": (0.70, 0.15, 0.15),
    "data.augment": True,
    "data.seed": 0,
    "model.preset": "vgg16",
    "model.use_batchnorm": True,
    "model.init_seed": 0,
    "loss.lambda_case": 7,
    "loss.reduction": "sum",
    "train.base_lr": 9e-5,
    "train.decay_factor": 0.8,
    "train.decay_every": 30_000,
    "train.total_iters": 240_000,
    "train.batch_size": 2,
    "train.momentum": 0.8,
    "train.weight_decay": 6e-4,
    "train.seed": 0,
    "train.checkpoint_every": 10_000,
    "detect.backbone": "resnet_like",
    "detect.lr_phase1": 1e-3,
    "detect.lr_phase2": 3e-4,
    "detect.phase_length": 250,
    "detect.batch_size": 32,
    "detect.pretrained_init": False,
    "detect.weights_path": "",
    "eval.threshold": 0.48,
    "eval.gf": False,
    "eval.gf_radius": 4,
    "eval.gf_eps": 1e-3,
    "eval.output": "fused",
}

TINY: dict[str, Any] = {
    "data.input_size": 64,
    "model.preset": "tiny",
    "train.base_lr": 1e-3,
    "train.total_iters": 2_000,
    "train.decay_every": 500,
    "train.checkpoint_every": 500,
    "detect.backbone": "tiny",
    "detect.phase_length": 100,
}

CHOICES = {
    "model.preset": ("vgg16", "tiny"),
    "loss.reduction": ("sum", "mean"),
    "detect.backbone": ("alexnet_like", "vgg16_like", "vgg19_like", "resnet_like", "tiny"),
    "eval.output": ("fused", "side1", "side2", "side3", "side4", "side5"),
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, text: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            value = float(text)
            if value != int(value):
                raise ValueError(text)
            return int(value)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    if key in CHOICES and text not in CHOICES[key]:
        raise ConfigError(f"{key}: {text!r} is not one of {', '.join(CHOICES[key])}")
    return text


def parse_config(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw.strip()!r}")
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def load_run_config(path=None, tiny: bool = False, overrides: dict | None = None) -> dict:
    """Defaults, then the tiny preset, then the file, then ``overrides`` (None values skipped)."""
    cfg = dict(DEFAULTS)
    if tiny:
        cfg.update(TINY)
    if path:
        cfg.update(parse_config(Path(path).read_text()))
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        if value is not None:
            cfg[key] = value
    return cfg


def section(cfg: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def dump_config(cfg: dict) -> str:
    lines = []
    for key in DEFAULTS:
        value = cfg[key]
        if isinstance(value, tuple):
            value = ",".join(repr(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
