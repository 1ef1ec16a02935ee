"""JSON run configuration with strict key checking."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict

from .errors import ConfigError
from .loss import LossConfig
from .model import FieldModelConfig, TimeEmbeddingConfig
from .synth import SynthConfig
from .train import TrainConfig

# JSON uses "lambda" where the dataclasses use ``lam``
_ALIASES = {"lambda": "lam"}


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: FieldModelConfig = field(default_factory=FieldModelConfig)
    embed: TimeEmbeddingConfig = field(default_factory=TimeEmbeddingConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> Dict[str, Any]:
        out = {}
        for f in fields(self):
            section = asdict(getattr(self, f.name))
            out[f.name] = {("lambda" if k == "lam" else k): list(v) if isinstance(v, tuple) else v
                           for k, v in section.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_SECTIONS = {f.name: f for f in fields(RunConfig)}
_TYPES = {"train": TrainConfig, "loss": LossConfig, "model": FieldModelConfig,
          "embed": TimeEmbeddingConfig, "synth": SynthConfig}
_TUPLES = {("model", "channels"), ("synth", "dims"), ("train", "betas")}


def _build(name: str, raw: Any):
    cls = _TYPES[name]
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be an object")
    allowed = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        attr = _ALIASES.get(key, key)
        if attr not in allowed:
            raise ConfigError(f"unknown key '{name}.{key}'")
        if (name, attr) in _TUPLES:
            if not isinstance(value, list):
                raise ConfigError(f"'{name}.{key}' must be a list")
            value = tuple(value)
        kwargs[attr] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from None


def from_dict(raw: Dict[str, Any]) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    cfg = RunConfig(**{name: _build(name, value) for name, value in raw.items()})
    if cfg.model.rank != len(cfg.synth.dims):
        raise ConfigError(f"model rank {cfg.model.rank} does not match synth dims {cfg.synth.dims}")
    return cfg


def load(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(raw)
