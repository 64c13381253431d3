"""Run configuration: model dimensions, loss weights, optimizer, data spec."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .errors import ConfigurationError
from .rng import ALGORITHM

SCHEMA_VERSION = 1


@dataclass
class Config:
    schema_version: int = SCHEMA_VERSION
    rng_algorithm: str = ALGORITHM

    # model dimensions
    width: int = 64                 # shared feature width
    heads: int = 4
    ffn_width: int = 128
    decoder_layers: int = 3
    num_queries: int = 8
    stage_channels: tuple = (16, 32, 64, 128)
    text_blocks: int = 2
    max_len: int = 20

    # behavior flags
    cdec_enabled: bool = True
    share_qgm_params: bool = False
    precision: str = "float32"      # "float32" | "float64"

    # loss weights
    seg_weight: float = 1.0
    recon_weight: float = 0.1

    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 300
    batch_size: int = 8
    eval_every: int = 1

    # data spec
    image_size: int = 64
    grid_cells: int = 2
    min_objects: int = 2
    max_objects: int = 4
    train_size: int = 32
    val_size: int = 0
    data_seed: int = 7
    model_seed: int = 1

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.validate()

    def validate(self) -> "Config":
        positive = {
            "width": self.width, "heads": self.heads, "ffn_width": self.ffn_width,
            "decoder_layers": self.decoder_layers, "num_queries": self.num_queries,
            "text_blocks": self.text_blocks, "max_len": self.max_len,
            "epochs": self.epochs, "batch_size": self.batch_size,
            "image_size": self.image_size, "grid_cells": self.grid_cells,
            "min_objects": self.min_objects, "max_objects": self.max_objects,
            "train_size": self.train_size, "eval_every": self.eval_every,
        }
        for name, value in positive.items():
            if int(value) < 1:
                raise ConfigurationError(f"{name} must be positive, got {value}")
        if self.val_size < 0:
            raise ConfigurationError(f"val_size must be nonnegative, got {self.val_size}")
        if self.seg_weight < 0 or self.recon_weight < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if len(self.stage_channels) != 4:
            raise ConfigurationError(f"need four stage channels, got {self.stage_channels}")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError(f"precision must be float32 or float64, got {self.precision}")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(
                f"config schema {self.schema_version} not supported (expected {SCHEMA_VERSION})")
        if self.rng_algorithm != ALGORITHM:
            raise ConfigurationError(
                f"unknown rng algorithm {self.rng_algorithm!r} (expected {ALGORITHM!r})")
        if self.image_size % 16:
            raise ConfigurationError(f"image_size must be divisible by 16, got {self.image_size}")
        if self.min_objects > self.max_objects:
            raise ConfigurationError("min_objects exceeds max_objects")
        if self.max_objects > self.grid_cells ** 2:
            raise ConfigurationError(
                f"cannot place {self.max_objects} objects on a {self.grid_cells}x{self.grid_cells} grid")
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["stage_channels"] = list(self.stage_channels)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "Config":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError("config JSON must be an object")
        return cls.from_dict(data)

    @classmethod
    def reference_scale(cls) -> "Config":
        """Full-scale hyperparameters; not the acceptance path."""
        return cls(width=512, heads=8, ffn_width=2048, num_queries=24,
                   lr=5e-3, epochs=40, batch_size=64, image_size=480,
                   stage_channels=(128, 256, 512, 1024), train_size=512, val_size=128)

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)
