"""Configuration dataclasses, architecture presets and JSON/override loading."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

PRESETS = {
    "deit-t": dict(depth=12, embed_dim=192, heads=3, patch_size=16, image_size=224, num_classes=1000),
    "deit-s": dict(depth=12, embed_dim=384, heads=6, patch_size=16, image_size=224, num_classes=1000),
    "deit-b": dict(depth=12, embed_dim=768, heads=12, patch_size=16, image_size=224, num_classes=1000),
}

HALT_MODES = ("cumulative-sum", "cumulative-product", "pause-restart")
_HALT_ALIASES = {"cumulative": "cumulative-sum", "sum": "cumulative-sum", "product": "cumulative-product"}
MASK_MODES = ("drop", "zero")
SCALE_MODES = ("sqrt_d", "d_literal")
REG_SCOPES = ("all", "cumulation")
TARGET_MODES = ("fixed", "dynamic")


@dataclass
class ModelConfig:
    depth: int = 12
    embed_dim: int = 384
    heads: int = 6
    patch_size: int = 16
    image_size: int = 224
    in_chans: int = 3
    num_classes: int = 1000
    mlp_ratio: float = 4.0
    qkv_bias: bool = True
    ln_eps: float = 1e-6
    preset: str | None = None

    def __post_init__(self):
        if self.depth < 0:
            raise ConfigError("model.depth must be >= 0", "model.depth")
        for name in ("embed_dim", "heads", "patch_size", "image_size", "in_chans", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive", f"model.{name}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}", "model.heads")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}", "model.patch_size"
            )

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "ModelConfig":
        key = name.lower()
        if key not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}", "model.preset")
        return cls(**{**PRESETS[key], **overrides, "preset": key})

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass
class TpcConfig:
    gamma: float = 5.0
    beta: float = 40.0
    zeta: float = 0.5
    delta: float = 0.01
    kappa: int = 100
    phi_p: float = 5e-4
    phi_d: float = 0.1
    target_depth: float | None = None
    target_depth_mode: str = "fixed"
    gate_dims: tuple = (0, 1)
    attn_scale_mode: str = "sqrt_d"
    halt_mode: str = "cumulative-sum"
    mask_mode: str = "drop"
    learnable_gates: bool = False
    regularize_scope: str = "all"
    stabilizer: bool = True

    def __post_init__(self):
        self.halt_mode = _HALT_ALIASES.get(self.halt_mode, self.halt_mode)
        self.gate_dims = tuple(int(d) for d in self.gate_dims)
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("tpc.delta must lie in (0, 1)", "tpc.delta")
        if not 0.0 <= self.zeta <= 1.0:
            raise ConfigError("tpc.zeta must lie in [0, 1]", "tpc.zeta")
        if self.kappa < 1:
            raise ConfigError("tpc.kappa must be >= 1", "tpc.kappa")
        if len(self.gate_dims) != 2 or self.gate_dims[0] == self.gate_dims[1] or min(self.gate_dims) < 0:
            raise ConfigError("tpc.gate_dims must be two distinct non-negative indices", "tpc.gate_dims")
        for name, allowed in (
            ("halt_mode", HALT_MODES),
            ("mask_mode", MASK_MODES),
            ("attn_scale_mode", SCALE_MODES),
            ("regularize_scope", REG_SCOPES),
            ("target_depth_mode", TARGET_MODES),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"tpc.{name} must be one of {allowed}", f"tpc.{name}")
        if self.phi_p < 0 or self.phi_d < 0:
            raise ConfigError("loss weights must be non-negative", "tpc.phi_p")

    def resolved_target_depth(self, depth: int) -> float:
        return float(math.ceil(depth / 2)) if self.target_depth is None else float(self.target_depth)


def validate_model(model: ModelConfig, tpc: TpcConfig) -> None:
    """Cross-field checks that need both the architecture and the controller settings."""
    if max(tpc.gate_dims) >= model.embed_dim:
        raise ConfigError(f"tpc.gate_dims {tpc.gate_dims} must be < embed_dim {model.embed_dim}", "tpc.gate_dims")
    if model.depth >= 1 and tpc.target_depth is not None and not 1 <= tpc.target_depth <= model.depth:
        raise ConfigError(f"tpc.target_depth must lie in [1, {model.depth}]", "tpc.target_depth")


@dataclass
class DataConfig:
    source: str = "synthetic-blobs"
    path: str | None = None
    train_size: int = 128
    eval_size: int = 64
    num_classes: int = 2
    image_size: int = 8
    channels: int = 3
    noise: float = 0.3
    mean: tuple = (0.0,)
    std: tuple = (1.0,)
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("synthetic-blobs", "cifar10-binary", "tensor-dir"):
            raise ConfigError(f"unknown data.source {self.source!r}", "data.source")
        if self.source != "synthetic-blobs" and not self.path:
            raise ConfigError(f"data.path is required for source {self.source!r}", "data.path")
        self.mean = tuple(float(m) for m in self.mean)
        self.std = tuple(float(s) for s in self.std)
        if any(s <= 0 for s in self.std):
            raise ConfigError("data.std entries must be positive", "data.std")


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_frac: float = 0.05
    min_lr_ratio: float = 1e-4

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("optim.lr must be positive", "optim.lr")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("optim.warmup_frac must lie in [0, 1)", "optim.warmup_frac")
        if not 0 < self.min_lr_ratio <= 1e-3:
            raise ConfigError("optim.min_lr_ratio must lie in (0, 1e-3]", "optim.min_lr_ratio")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    seed: int = 0
    dtype: str = "float64"
    debug: bool = False
    trace: bool = False
    checkpoint_every: int = 0
    plots: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("train.epochs >= 0 and train.batch_size >= 1 required", "train.batch_size")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64", "train.dtype")


SECTIONS = {
    "model": ModelConfig,
    "tpc": TpcConfig,
    "data": DataConfig,
    "optim": OptimConfig,
    "train": TrainConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    tpc: TpcConfig = field(default_factory=TpcConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        validate_model(self.model, self.tpc)

    @classmethod
    def from_dict(cls, raw: dict, overrides=()) -> "RunConfig":
        """Build from nested dicts, rejecting unknown keys, after applying ``key=value`` overrides."""
        raw = json.loads(json.dumps(raw))
        for item in overrides:
            _apply_override(raw, item)
        sections = {}
        for name, raw_section in raw.items():
            if name not in SECTIONS:
                raise ConfigError(f"unknown config section {name!r}", name)
            if not isinstance(raw_section, dict):
                raise ConfigError(f"section {name!r} must be an object", name)
            sections[name] = _build_section(name, raw_section)
        for name, kind in SECTIONS.items():
            sections.setdefault(name, _build_section(name, {}))
        return cls(**sections)

    @classmethod
    def load(cls, path, overrides=()) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}", "--config") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}", "--config") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object", "--config")
        return cls.from_dict(raw, overrides)

    def to_dict(self) -> dict:
        return {name: _section_dict(getattr(self, name)) for name in SECTIONS}


def _section_dict(section) -> dict:
    out = {}
    for f in dataclasses.fields(section):
        value = getattr(section, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def _build_section(name: str, raw: dict):
    kind = SECTIONS[name]
    known = {f.name for f in dataclasses.fields(kind)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key {name}.{key}", f"{name}.{key}")
    try:
        if name == "model" and raw.get("preset"):
            rest = {k: v for k, v in raw.items() if k != "preset"}
            return ModelConfig.from_preset(raw["preset"], **rest)
        return kind(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad value in section {name}: {exc}", name) from exc


def _apply_override(raw: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value", item)
    key, text = item.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigError(f"override key {key!r} must be section.field", key)
    section, name = parts
    if name not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
        raise ConfigError(f"unknown config key {key}", key)
    raw.setdefault(section, {})[name] = parse_value(text)


def parse_value(text: str) -> Any:
    """JSON literal if it parses, else the raw string (so ``mask_mode=zero`` works unquoted)."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text
