"""Run configuration: one JSON document with a section per pipeline stage.

Documents are merged onto a named preset. Keys not present in the preset
are rejected, except inside the free-form ``param_ranges`` and schedule
``params`` maps.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

VARIANTS = ("full", "no-ltma", "no-stme", "unconditional")
FREE_FORM = {("data", "param_ranges"), ("diffusion", "schedule", "params")}

_TOY_RANGES = {
    "amplitude": [0.0, 0.35],
    "r_inner": [2.5, 3.5],
    "r_outer": [5.0, 6.5],
    "center_dx": [-1.0, 1.0],
    "center_dy": [-1.0, 1.0],
}

TOY = {
    "preset": "toy",
    "seed": 0,
    "data": {
        "n_samples": 50,
        "n_reference": 24,
        "phantom": {"height": 16, "width": 16, "frames": 8, "r_inner": 3.0, "r_outer": 6.0},
        "param_ranges": _TOY_RANGES,
    },
    "registration": {
        "channels": [16, 32],
        "heads": 4,
        "use_ltma": True,
        "attention_scale": True,
        "activation": "leaky_relu",
        "lam": 10.0,
        "weight_decay": 1e-5,
        "num_squarings": 7,
        "lr": 1e-3,
        "epochs": 100,
        "batch_size": 4,
        "velocity_init_std": 1e-5,
    },
    "stme": {"hidden_channels": 16, "out_channels": 32, "kernel_size": 3, "spatial_strides": [2, 2], "heads": 4, "input_scale": 1.0},
    "diffusion": {
        "schedule": {"kind": "sigmoid_beta", "T": 200, "params": {}},
        "denoiser": {
            "base_channels": 16,
            "channel_mult": [1, 2, 2],
            "attention_levels": [1, 2],
            "heads": 4,
            "temb_dim": 32,
            "kernel_size": 3,
            "groups": 8,
        },
        "lr": 1e-3,
        "batch_size": 8,
        "steps": 2000,
        "variance": "beta",
        "log_every": 100,
        "mask_motion": True,
    },
    "sampling": {"n_samples": 24, "motion_source": "reference", "batch_size": 24},
    "eval": {"variants": ["full"], "extractor_seed": 0},
}


def _derive(base: dict, changes: dict) -> dict:
    out = copy.deepcopy(base)
    for path, value in changes.items():
        node = out
        keys = path.split(".")
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value
    return out


PRESETS = {
    "toy": TOY,
    "ablation": _derive(TOY, {"preset": "ablation", "eval.variants": list(VARIANTS)}),
    "paper64": _derive(
        TOY,
        {
            "preset": "paper64",
            "data.n_samples": 741,
            "data.phantom": {"height": 64, "width": 64, "frames": 10, "r_inner": 10.0, "r_outer": 18.0},
            "data.param_ranges": {
                "amplitude": [0.0, 0.35],
                "r_inner": [8.0, 12.0],
                "r_outer": [16.0, 22.0],
                "center_dx": [-3.0, 3.0],
                "center_dy": [-3.0, 3.0],
            },
            "registration.epochs": 200,
            "stme.hidden_channels": 32,
            "stme.out_channels": 64,
            "diffusion.schedule": {"kind": "sigmoid_beta", "T": 1000, "params": {}},
            "diffusion.denoiser.base_channels": 32,
            "diffusion.denoiser.channel_mult": [1, 2, 4],
            "diffusion.denoiser.temb_dim": 64,
            "diffusion.lr": 1e-5,
            "diffusion.batch_size": 20,
            "diffusion.steps": 25_000,
            "sampling.batch_size": 4,
            "eval.variants": list(VARIANTS),
        },
    ),
    "smoke": _derive(
        TOY,
        {
            "preset": "smoke",
            "data.n_samples": 4,
            "data.n_reference": 3,
            "data.phantom": {"height": 16, "width": 16, "frames": 4, "r_inner": 3.0, "r_outer": 6.0},
            "registration.channels": [4, 8],
            "registration.epochs": 1,
            "stme.hidden_channels": 4,
            "stme.out_channels": 8,
            "diffusion.schedule": {"kind": "linear", "T": 4, "params": {}},
            "diffusion.denoiser.base_channels": 8,
            "diffusion.denoiser.channel_mult": [1, 2],
            "diffusion.denoiser.attention_levels": [1],
            "diffusion.denoiser.heads": 2,
            "diffusion.denoiser.temb_dim": 8,
            "diffusion.steps": 2,
            "diffusion.batch_size": 2,
            "sampling.n_samples": 3,
            "sampling.batch_size": 3,
            "stme.heads": 2,
        },
    ),
}


def merge_strict(base: dict, override: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = ".".join(path + (key,))
        if key not in base:
            raise ValueError(f"unknown config key {where!r}")
        if path + (key,) in FREE_FORM:
            if not isinstance(value, dict):
                raise ValueError(f"{where} must be a mapping")
            out[key] = copy.deepcopy(value)
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"{where} must be a mapping")
            out[key] = merge_strict(base[key], value, path + (key,))
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(doc: dict | None = None, preset: str | None = None, seed: int | None = None) -> dict:
    """Preset + document (+ seed override) -> fully resolved config."""
    doc = dict(doc or {})
    name = preset or doc.get("preset", "toy")
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = merge_strict(PRESETS[name], doc)
    cfg["preset"] = name
    if seed is not None:
        cfg["seed"] = int(seed)
    bad = [v for v in cfg["eval"]["variants"] if v not in VARIANTS]
    if bad or not cfg["eval"]["variants"]:
        raise ValueError(f"unknown or empty variant list {cfg['eval']['variants']}; choose from {VARIANTS}")
    if cfg["data"]["n_reference"] < 2 or cfg["sampling"]["n_samples"] < 2:
        raise ValueError("evaluation needs at least two reference and two sampled videos")
    return cfg


def load_config(path=None, preset: str | None = None, seed: int | None = None) -> dict:
    doc = json.loads(Path(path).read_text()) if path else {}
    return resolve_config(doc, preset, seed)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def run_id(cfg: dict) -> str:
    return config_hash(cfg)[:12]


def variant_config(cfg: dict, variant: str) -> dict:
    """Config for one ablation row: the full model with one component removed."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    out = copy.deepcopy(cfg)
    if variant == "no-ltma":
        out["registration"]["use_ltma"] = False
    out["diffusion"]["denoiser"]["cond_mode"] = {"no-stme": "raw", "unconditional": "none"}.get(variant, "stme")
    return out
