"""Run configuration: nested dataclasses, JSON round trip and a stable hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any

from .corpus import SynthSpec
from .errors import ConfigError
from .loss import LossConfig
from .pairing import PairingConfig
from .train import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    synth: SynthSpec = field(default_factory=SynthSpec)
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    pairing: PairingConfig = field(default_factory=PairingConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    # desk default; TrainConfig keeps the full-scale batch of 1024
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=128))
    scenario: str = "hard"
    tau: str = "deterr"
    out: str = "runs/default"

    def resolved(self) -> "RunConfig":
        """Push the top-level seed and k_mine into the sub-configs."""
        return replace(
            self,
            synth=replace(self.synth, seed=self.seed),
            train=replace(self.train, seed=self.seed, k_mine=self.pairing.k_mine),
        )

    def to_dict(self) -> dict:
        return _plain(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        """Digest of everything that shapes a trained model (not output paths
        or evaluation choices)."""
        d = self.resolved().to_dict()
        for k in ("out", "scenario", "tau"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    def override(self, **dotted: Any) -> "RunConfig":
        """Return a copy with ``section.key=value`` style overrides applied."""
        d = self.to_dict()
        for key, value in dotted.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key}")
            node[parts[-1]] = value
        return RunConfig.from_dict(d)


def _plain(obj):
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    return obj


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value)
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        elif isinstance(current, Enum):
            kwargs[name] = type(current)(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc

