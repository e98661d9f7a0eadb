"""Run configuration: schema, YAML loading and shipped presets.

A config file is a YAML mapping mirroring :class:`RunConfig`.  Unknown keys
are rejected at every nesting level before any work starts.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .degrade import DegradeError, DegradeSpec
from .model import ConfigError, ViTConfig

MODES = ("pretrain", "finetune", "linprobe", "eval")


class SchemaError(ValueError):
    pass


def _from_dict(cls, d, where: str):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise SchemaError(f"{where}: expected a mapping, got {type(d).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise SchemaError(f"{where}: unknown key(s) {sorted(unknown)}")
    return cls(**d)


@dataclass
class DataConfig:
    synth: dict | None = None
    dir: str | None = None
    split_ratios: list = field(default_factory=lambda: [3, 1, 1])
    split_seed: int = 0

    def validate(self, where="data"):
        if (self.synth is None) == (self.dir is None):
            raise SchemaError(f"{where}: give exactly one of 'synth' or 'dir'")
        if len(self.split_ratios) != 3 or any(r <= 0 for r in self.split_ratios):
            raise SchemaError(f"{where}.split_ratios: need three positive numbers")


@dataclass
class OptimConfig:
    name: str = "adamw"
    base_lr: float = 1.5e-4
    lr_scaling: str = "linear"
    weight_decay: float = 0.05
    betas: list = field(default_factory=lambda: [0.9, 0.95])
    eps: float = 1e-8
    momentum: float = 0.9
    layer_decay: float = 1.0

    def validate(self, where="optim"):
        if self.name not in ("adamw", "lars"):
            raise SchemaError(f"{where}.name: expected 'adamw' or 'lars', got {self.name!r}")
        if self.lr_scaling not in ("linear", "none"):
            raise SchemaError(f"{where}.lr_scaling: expected 'linear' or 'none'")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise SchemaError(f"{where}: base_lr and weight_decay must be >= 0")
        if len(self.betas) != 2:
            raise SchemaError(f"{where}.betas: need two values")
        if not 0 < self.layer_decay <= 1:
            raise SchemaError(f"{where}.layer_decay must lie in (0, 1]")


@dataclass
class ScheduleConfig:
    warmup_epochs: float = 40
    min_lr: float = 0.0


@dataclass
class AugmentConfig:
    crop: bool = False
    scale: list = field(default_factory=lambda: [0.6, 1.0])


@dataclass
class RunConfig:
    mode: str = "pretrain"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    degrade: dict | None = None
    mask_ratio: float = 0.75
    model: dict = field(default_factory=dict)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    epochs: int = 300
    batch_size: int = 32
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    label_smoothing: float = 0.0
    ckpt_in: str | None = None
    ckpt_out: str | None = None
    metrics_out: str | None = None
    scratch: bool = False
    allow_degrade_override: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        sub = {"data": DataConfig, "optim": OptimConfig, "schedule": ScheduleConfig,
               "augment": AugmentConfig}
        for key, kind in sub.items():
            if key in d:
                d[key] = _from_dict(kind, d[key], key)
        cfg = _from_dict(cls, d, "config")
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise SchemaError(f"mode: expected one of {MODES}, got {self.mode!r}")
        if self.mode != "eval":
            self.data.validate()
        self.optim.validate()
        if not 0 <= self.mask_ratio < 1:
            raise SchemaError("mask_ratio must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise SchemaError("epochs and batch_size must be >= 1")
        if not 0 <= self.schedule.warmup_epochs < self.epochs:
            raise SchemaError("schedule.warmup_epochs must lie in [0, epochs)")
        if not 0 <= self.label_smoothing < 0.5:
            raise SchemaError("label_smoothing must lie in [0, 0.5)")
        try:
            self.vit()
            self.degrade_spec()
        except (ConfigError, DegradeError, TypeError) as exc:
            raise SchemaError(str(exc)) from exc
        if self.mode in ("finetune", "linprobe") and not (self.ckpt_in or self.scratch):
            raise SchemaError(f"{self.mode} needs ckpt_in or scratch: true")

    def vit(self) -> ViTConfig:
        return ViTConfig.from_dict(self.model)

    def degrade_spec(self) -> DegradeSpec | None:
        if self.degrade is None:
            return None
        return DegradeSpec.from_dict(self.degrade)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def updated(self, **changes) -> "RunConfig":
        d = copy.deepcopy(self.to_dict())
        for key, val in changes.items():
            _set_path(d, key, val)
        return RunConfig.from_dict(d)


def _set_path(d: dict, dotted: str, val) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        if d.get(k) is None:
            d[k] = {}
        d = d[k]
    d[keys[-1]] = val


# ---------------------------------------------------------------------------
# presets
#
# The ``*.default`` presets carry the appendix settings unchanged (batch 256,
# base lr referenced to batch 256, warmup epochs, momentum terms).  The
# ``*.desk`` presets shrink data, epochs and batch so a run fits on one CPU.

DESK_SYNTH = {"count": 256, "image_side": 32, "labeled": False, "seed": 1000}
DESK_LABELED = {"count": 1000, "image_side": 32, "labeled": True, "seed": 2000}
_FULL_SIDE = {"image_side": 224, "spot_radius": 6.0}

PRESETS: dict[str, dict] = {
    "pretrain.default": {
        "mode": "pretrain",
        "data": {"synth": {**DESK_SYNTH, **_FULL_SIDE}},
        "degrade": {"method": "gaussian", "params": {"sigma": 1.1}},
        "mask_ratio": 0.75,
        "model": {"image_size": 224, "patch_size": 16, "enc_dim": 768, "enc_depth": 12,
                  "enc_heads": 12, "dec_dim": 512, "dec_depth": 8, "dec_heads": 16},
        "optim": {"name": "adamw", "base_lr": 1.5e-4, "weight_decay": 0.05,
                  "betas": [0.9, 0.95], "lr_scaling": "linear"},
        "schedule": {"warmup_epochs": 40},
        "epochs": 12000,
        "batch_size": 256,
        "augment": {"crop": True},
    },
    "finetune.default": {
        "mode": "finetune",
        "data": {"synth": {**DESK_LABELED, **_FULL_SIDE}},
        "model": {"image_size": 224, "patch_size": 16, "enc_dim": 768, "enc_depth": 12,
                  "enc_heads": 12, "dec_dim": 512, "dec_depth": 8, "dec_heads": 16},
        "optim": {"name": "adamw", "base_lr": 1e-3, "weight_decay": 0.05,
                  "betas": [0.9, 0.999], "layer_decay": 0.75, "lr_scaling": "linear"},
        "schedule": {"warmup_epochs": 5},
        "epochs": 100,
        "batch_size": 256,
        "label_smoothing": 0.1,
    },
    "linprobe.default": {
        "mode": "linprobe",
        "data": {"synth": {**DESK_LABELED, **_FULL_SIDE}},
        "model": {"image_size": 224, "patch_size": 16, "enc_dim": 768, "enc_depth": 12,
                  "enc_heads": 12, "dec_dim": 512, "dec_depth": 8, "dec_heads": 16},
        "optim": {"name": "lars", "base_lr": 0.1, "weight_decay": 0.0, "momentum": 0.9,
                  "lr_scaling": "linear"},
        "schedule": {"warmup_epochs": 10},
        "epochs": 90,
        "batch_size": 1024,
        "augment": {"crop": True},
    },
}

PRESETS["pretrain.desk"] = {
    **PRESETS["pretrain.default"],
    "data": {"synth": DESK_SYNTH},
    "model": {},
    "optim": {**PRESETS["pretrain.default"]["optim"], "base_lr": 1.5e-3, "lr_scaling": "none"},
    "schedule": {"warmup_epochs": 20},
    "epochs": 300,
    "batch_size": 8,
    "augment": {"crop": False},
}
PRESETS["finetune.desk"] = {
    **PRESETS["finetune.default"],
    "data": {"synth": DESK_LABELED},
    "model": {},
    "optim": {**PRESETS["finetune.default"]["optim"], "lr_scaling": "none"},
    "epochs": 40,
    "batch_size": 32,
}
PRESETS["linprobe.desk"] = {
    **PRESETS["linprobe.default"],
    "data": {"synth": DESK_LABELED},
    "model": {},
    "optim": {**PRESETS["linprobe.default"]["optim"], "lr_scaling": "none"},
    "epochs": 60,
    "batch_size": 64,
    "augment": {"crop": False},
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise SchemaError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    d = copy.deepcopy(PRESETS[name])
    if d["mode"] != "pretrain":
        d["scratch"] = True
    return RunConfig.from_dict(d)


def load_config(path) -> RunConfig:
    """Read a YAML config; ``preset: <name>`` pulls in a preset as the base."""
    path = Path(path)
    raw = yaml.safe_load(path.read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise SchemaError(f"{path}: top level must be a mapping")
    return config_from_mapping(raw, str(path))


def config_from_mapping(raw: dict, where: str = "config") -> RunConfig:
    raw = dict(raw)
    base_name = raw.pop("preset", None)
    if base_name is not None:
        if base_name not in PRESETS:
            raise SchemaError(f"{where}: unknown preset {base_name!r}")
        raw = _merge(copy.deepcopy(PRESETS[base_name]), raw)
    return RunConfig.from_dict(raw)


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "degrade":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(_plain(cfg.to_dict()), sort_keys=True)


def _plain(x):
    if is_dataclass(x):
        x = asdict(x)
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x
