"""Model and training configuration with the published defaults."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

__all__ = ["ModelConfig", "TrainConfig", "ConfigError", "load_config", "merge_config"]


class ConfigError(Exception):
    pass


@dataclass
class ModelConfig:
    d: int = 128                     # shared embedding / encoder width
    n_blocks: int = 4                # stacked Transformer blocks
    n_heads: int = 4
    ffn_mult: int = 4                # d_f = ffn_mult * d
    k: int = 150                     # total convolution channels
    windows: Tuple[int, ...] = (2, 3, 4)
    d_g: int = 64                    # GRU units per direction
    gru_layers: int = 2
    dropout: float = 0.5
    l2: float = 3e-4
    alpha: float = 0.75              # focal class-balance weight
    beta: float = 4.0                # focal focusing exponent
    max_len: int = 128
    positional: str = "learned"      # or "sinusoidal"
    pooling: str = "mean"            # or "max"

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ConfigError(f"n_heads {self.n_heads} must divide d {self.d}")
        if self.k % len(self.windows) != 0:
            raise ConfigError(f"k {self.k} must split evenly over {len(self.windows)} windows")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.positional not in ("learned", "sinusoidal"):
            raise ConfigError(f"unknown positional mode {self.positional!r}")
        if self.pooling not in ("mean", "max"):
            raise ConfigError(f"unknown pooling mode {self.pooling!r}")

    @property
    def d_f(self) -> int:
        return self.ffn_mult * self.d

    @property
    def channels_per_window(self) -> int:
        return self.k // len(self.windows)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    patience: int = 2                # plateau epochs before halving lr
    lr_factor: float = 0.5
    clip_norm: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        for name in ("lr", "batch_size", "epochs", "lr_factor", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(field: dataclasses.Field, value: Any) -> Any:
    if field.name == "windows":
        return tuple(int(v) for v in value)
    if field.type == "int":
        return int(value)
    if field.type == "float":
        return float(value)
    return value


def merge_config(document: Optional[Dict[str, Any]] = None,
                 overrides: Optional[Dict[str, Any]] = None
                 ) -> Tuple[ModelConfig, TrainConfig]:
    """defaults <- document <- overrides, later wins; unknown keys error."""
    model_kwargs: Dict[str, Any] = {}
    train_kwargs: Dict[str, Any] = {}
    for source in (document or {}, overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key in _MODEL_FIELDS:
                model_kwargs[key] = _coerce(_MODEL_FIELDS[key], value)
            elif key in _TRAIN_FIELDS:
                train_kwargs[key] = _coerce(_TRAIN_FIELDS[key], value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def load_config(path: Optional[str] = None,
                overrides: Optional[Dict[str, Any]] = None
                ) -> Tuple[ModelConfig, TrainConfig]:
    """Read a flat JSON document (may be absent) and apply overrides."""
    document: Dict[str, Any] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read().strip()
        if text:
            document = json.loads(text)
            if not isinstance(document, dict):
                raise ConfigError("config file must hold a flat JSON object")
    return merge_config(document, overrides)


def config_to_dict(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Dict[str, Any]:
    doc = dataclasses.asdict(model_cfg)
    doc["windows"] = list(doc["windows"])
    doc.update(dataclasses.asdict(train_cfg))
    return doc
