"""Training configuration and its ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError
from .model import ModelConfig


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 2000
    delta: float = 0.9
    lam: float = 100.0
    layers: int = 4
    d: int = 32
    ffn_hidden: int = 0  # 0 means 2*d
    use_lra: bool = True
    sigma: float = 8.0
    seed: int = 0
    max_grid: int = 32
    checkpoint_every: int = 500

    def __post_init__(self):
        if not (0.0 < self.delta <= 1.0):
            raise ConfigurationError(f"delta must lie in (0, 1], got {self.delta}")
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.lr <= 0 or self.sigma <= 0:
            raise ConfigurationError("lr and sigma must be positive")
        if self.checkpoint_every < 1:
            raise ConfigurationError("checkpoint_every must be >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, layers=self.layers, ffn_hidden=self.ffn_hidden or None,
                           use_lra=self.use_lra)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            key = _ALIASES_OUT.get(f.name, f.name)
            value = getattr(self, f.name)
            lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
        return "\n".join(lines) + "\n"


# "lambda" is a keyword in python; the file format uses it anyway
_ALIASES_IN = {"lambda": "lam", "T": "layers"}
_ALIASES_OUT = {"lam": "lambda"}


def _convert(key: str, kind, text: str, lineno: int, path):
    try:
        if kind in (bool, "bool"):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("true", "1", "yes", "on")
        if kind in (int, "int"):
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigurationError(f"{path}:{lineno}: bad value {text!r} for {key}") from None


def parse_config(text: str, path="<config>") -> TrainConfig:
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {body!r}")
        key, value = (part.strip() for part in body.split("=", 1))
        name = _ALIASES_IN.get(key, key)
        if name not in types:
            raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
        values[name] = _convert(key, types[name], value, lineno, path)
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    if path is None:
        return TrainConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"), path)
