"""Run configuration: one JSON file plus command-line overrides."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from wegmil.errors import ConfigError, ParseError


@dataclass
class RunConfig:
    seed: int = 0
    # None means "take it from the manifest / embeddings"
    K: int | None = None
    K_c: int | None = None
    d: int = 64
    d_in: int | None = None
    gin_layers: int = 3
    radius: float = 60.0
    sigmoid_on: bool = True
    freeze_experts: bool = True
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    pretrain_epochs: int = 20
    gate_epochs: int = 10
    gate_lr: float = 1e-3
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    train_naive: bool = True
    topq: int | None = None
    workers: int = 1
    # per-bag report figures rendered for the first N bags; 0 disables all figures
    figure_bags: int = 8
    gradcheck_entries: int = 12

    def __post_init__(self):
        self.split = tuple(float(v) for v in self.split)
        self.validate()

    def validate(self) -> None:
        if len(self.split) != 3 or any(not v > 0 for v in self.split):
            raise ConfigError(f"split fractions must be three positive numbers, got {self.split}")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions sum to {sum(self.split)}, not 1")
        for name in ("d", "gin_layers", "batch_size", "workers", "gradcheck_entries"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("K", "K_c", "d_in", "topq"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.figure_bags < 0:
            raise ConfigError("figure_bags must be >= 0")
        if self.pretrain_epochs < 0 or self.gate_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ConfigError(f"radius must be positive, got {self.radius}")
        if not self.lr > 0 or not self.gate_lr > 0:
            raise ConfigError("learning rates must be positive")

    def adam_hyper(self, lr: float | None = None) -> dict:
        return {"lr": self.lr if lr is None else lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.adam_eps}

    def to_json(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        raw = {}
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: {exc}") from exc
            if not isinstance(raw, dict):
                raise ParseError(f"{path}: config must be a JSON object")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(raw)


def derive_seed(seed: int, name: str) -> int:
    """Independent, reproducible sub-seed for one named phase."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
