"""Configuration records and the JSON run-config document.

A run config is a JSON object with three optional sections::

    {"model": {...}, "train": {...}, "data": {...}}

Every field has a default; unknown keys anywhere are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

__version__ = "0.1.0"

LOSS_VARIANTS = ("full", "pose_only", "pose+kt", "pose+vt", "kt+vt_only", "last_cycle_pose_only")


class ConfigError(ValueError):
    pass


def _tuple2(v) -> tuple:
    if isinstance(v, int):
        return (v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 2:
        raise ConfigError(f"expected a pair, got {v!r}")
    return t


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple = (64, 64)
    in_channels: int = 3
    patch_size: int = 16
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: float = 2.0
    num_keypoints: int = 5
    heatmap_size: tuple = (16, 16)
    num_cycles: int = 2
    alpha_kt: float = 5e-6
    alpha_vt: float = 5e-6
    detach_teacher: bool = True
    loss_variant: str = "full"
    dropout: float = 0.0
    ln_eps: float = 1e-5
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "image_size", _tuple2(self.image_size))
        object.__setattr__(self, "heatmap_size", _tuple2(self.heatmap_size))
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_cycles < 1:
            raise ConfigError("num_cycles must be >= 1")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if min(self.heatmap_size) < 2:
            raise ConfigError("heatmap_size entries must be >= 2")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError(f"unknown loss variant {self.loss_variant!r}; choose from {LOSS_VARIANTS}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def grid(self) -> tuple:
        return (self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size)

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class DataConfig:
    image_size: tuple = (64, 64)
    num_keypoints: int = 5
    heatmap_size: tuple = (16, 16)
    sigma: float = 1.5
    clutter_min: int = 2
    clutter_max: int = 5
    n_train: int = 2048
    n_val: int = 256
    base_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", _tuple2(self.image_size))
        object.__setattr__(self, "heatmap_size", _tuple2(self.heatmap_size))
        if self.sigma <= 0:
            raise ConfigError("sigma must be > 0")
        if self.clutter_min < 0 or self.clutter_max < self.clutter_min:
            raise ConfigError("clutter range invalid")
        if min(self.image_size) < 32:
            raise ConfigError("image_size must be at least 32x32 for the stick figure")

    def replace(self, **kw) -> "DataConfig":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    steps_per_epoch: int = 200
    batch_size: int = 32
    base_lr: float = 1e-3
    lr_decay_epochs: tuple = (20, 26)
    lr_decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 5
    checkpoint_path: str = ""

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        de = self.lr_decay_epochs
        if any(b <= a for a, b in zip(de, de[1:])):
            raise ConfigError("lr_decay_epochs must be strictly increasing")
        if de and de[-1] >= self.epochs:
            raise ConfigError("lr_decay_epochs must all be < epochs")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ConfigError("lr_decay_factor must be in (0, 1)")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs, steps_per_epoch and batch_size must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _build(cls, raw: Mapping[str, Any], section: str):
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad value in {section!r}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        m, d = self.model, self.data
        if m.image_size != d.image_size or m.heatmap_size != d.heatmap_size or m.num_keypoints != d.num_keypoints:
            raise ConfigError("model and data disagree on image_size / heatmap_size / num_keypoints")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "RunConfig":
        if not isinstance(raw, Mapping):
            raise ConfigError("run config must be a JSON object")
        unknown = sorted(set(raw) - {"model", "train", "data"})
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        return cls(
            model=_build(ModelConfig, raw.get("model"), "model"),
            train=_build(TrainConfig, raw.get("train"), "train"),
            data=_build(DataConfig, raw.get("data"), "data"),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {"model": to_dict(self.model), "train": to_dict(self.train), "data": to_dict(self.data)}

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def config_hash(cfg) -> str:
    """Stable 16-hex-digit digest of a config record (or plain dict)."""
    d = cfg if isinstance(cfg, dict) else (cfg.to_dict() if hasattr(cfg, "to_dict") else to_dict(cfg))
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
