"""Run configuration: one YAML file with a version key and five sections.

    config_version: 1
    generator: GeneratorSpec fields
    train:     TrainConfig fields
    phantom:   PhantomSpec fields
    prep:      PrepConfig fields
    metrics:   SSIMConfig fields

Every key is optional (defaults fill in); unknown sections or keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import PhantomSpec, PrepConfig
from .generator import GeneratorSpec
from .metrics import SSIMConfig
from .trainer import ConfigError, TrainConfig

CONFIG_VERSION = 1

_SECTIONS = {
    "generator": GeneratorSpec,
    "train": TrainConfig,
    "phantom": PhantomSpec,
    "prep": PrepConfig,
    "metrics": SSIMConfig,
}


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key {section}.{unknown[0]}")
    kwargs = {}
    for k, v in values.items():
        default = getattr(cls(), k)
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)
        elif isinstance(default, dict) and isinstance(v, dict):
            v = {**default, **{kk: tuple(vv) if isinstance(vv, list) else vv for kk, vv in v.items()}}
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section!r}: {exc}") from None


@dataclass
class RunConfig:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    prep: PrepConfig = field(default_factory=PrepConfig)
    metrics: SSIMConfig = field(default_factory=SSIMConfig)

    @classmethod
    def from_dict(cls, raw: dict | None) -> "RunConfig":
        raw = dict(raw or {})
        version = raw.pop("config_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"config_version {version} unsupported (expected {CONFIG_VERSION})")
        unknown = sorted(set(raw) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section {unknown[0]!r}")
        cfg = cls(**{name: _build(c, raw.get(name) or {}, name) for name, c in _SECTIONS.items()})
        f = 2**cfg.generator.depth
        if cfg.phantom.size % f or cfg.prep.inplane_size % f:
            raise ConfigError(
                f"phantom.size ({cfg.phantom.size}) and prep.inplane_size ({cfg.prep.inplane_size}) "
                f"must be divisible by 2^generator.depth = {f}"
            )
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        out = {"config_version": CONFIG_VERSION}
        for name in _SECTIONS:
            out[name] = _plain(dataclasses.asdict(getattr(self, name)))
        return out

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
