"""Flat dotted-key configuration with typed defaults.

A config file is a flat JSON object (``{"train.steps": 2000, ...}``); nested
objects are flattened with dots.  Overrides are ``key=value`` strings whose
values are parsed as JSON when possible.
"""
from __future__ import annotations

import json

from .errors import ConfigError

DEFAULTS = {
    # geometry
    "model.n_spheres": 64,
    "model.k": 32.0,
    "model.init_radius": 0.1,
    "model.init_spread": 1.0,
    "model.residual_sizes": [3, 128, 128, 128, 128, 1],
    "model.residual_encoding": 6,
    # reflectance
    "model.n_bases": 8,
    "model.basis_sizes": [3, 64, 64, 64, 3],
    "model.weight_hidden": [64, 64, 64],
    "model.weight_encoding": 6,
    # lighting
    "model.light_sizes": [3, 64, 64, 64, 6],
    "model.light_encoding": 0,
    "model.occlusion_sizes": [6, 64, 64, 64, 1],
    "model.occlusion_encoding": 4,
    "model.seed": 0,
    # optimisation
    "train.steps": 30000,
    "train.stage1_steps": 1000,
    "train.stage3_start": 0,
    "train.crop": 32,
    "train.crop_sampling": "mask_bbox",
    "train.lr": 5e-4,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.weight_decay": 1e-6,
    "train.lr_sketch_scale": 10.0,
    "train.lr_k_factor": 1.0,
    "train.lr_decay": 1.0,
    "train.w_photo": 1.0,
    "train.w_sil": 1.0,
    "train.w_occ": 0.1,
    "train.eps_bce": 1e-6,
    "train.visibility": "learned",
    "train.sil_samples": 64,
    "train.sil_alpha": 50.0,
    "train.sil_beta": 100.0,
    "train.sil_beta_final": 100.0,
    "train.checkpoint_every": 1000,
    "train.seed": 0,
    "train.threads": 1,
    # tracing / rendering
    "trace.hit_eps": 1e-4,
    "trace.max_iters": 128,
    "trace.step_scale": 0.9,
    "render.background": [1.0, 1.0, 1.0],
    "render.integrator": "direct",
    "render.visibility": "hard",
    "render.depth": 1,
    "render.spp": 1,
    "render.srgb": True,
    "render.threads": 1,
    "render.seed": 0,
}

CHOICES = {
    "train.crop_sampling": ("uniform", "mask_bbox"),
    "train.visibility": ("none", "hard", "learned"),
    "render.integrator": ("direct", "path", "normals", "light_direction", "silhouette"),
    "render.visibility": ("none", "hard", "learned"),
}


def flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key, value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"config key {key!r} expects a boolean, got {value!r}", key=key)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not float(value).is_integer():
            raise ConfigError(f"config key {key!r} expects an integer, got {value!r}", key=key)
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} expects a number, got {value!r}", key=key)
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"config key {key!r} expects a list, got {value!r}", key=key)
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {key!r} expects a string, got {value!r}", key=key)
        if key in CHOICES and value not in CHOICES[key]:
            raise ConfigError(f"config key {key!r} must be one of {CHOICES[key]}, got {value!r}", key=key)
        return value
    return value


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value", key=text)
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def resolve(file_values=None, overrides=(), base=None):
    """Defaults <- file <- overrides; unknown keys raise ConfigError naming the key."""
    cfg = dict(DEFAULTS if base is None else base)
    layers = [flatten(file_values or {})]
    layers.append(dict(parse_override(o) if isinstance(o, str) else o for o in overrides))
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}", key=key)
            cfg[key] = _coerce(key, value, DEFAULTS[key])
    return cfg


def load_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON config ({exc})", key=str(path)) from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object", key=str(path))
    return data


def dump(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
