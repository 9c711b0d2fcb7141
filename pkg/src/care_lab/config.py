"""Experiment configuration: TOML in, fully-resolved canonical TOML out.

Unknown keys are hard errors so a typo never silently falls back to a default.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .repr import VariantConfig
from .sac import TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


@dataclass
class FamilyConfig:
    preset: str = "mt5"
    train: list[list[str]] = field(default_factory=list)
    held_out: list[list[str]] = field(default_factory=list)
    horizon: int = 60


@dataclass
class EmbedderConfig:
    mode: str = "hashed"
    dim: int = 768
    table_size: int = 65536
    seed: int = 42
    path: str = ""


@dataclass
class RunConfig:
    steps: int = 50000
    eval_every: int = 10000
    eval_episodes: int = 5
    eval_seed: int = 10000
    seeds: list[int] = field(default_factory=lambda: [0])
    buffer_capacity: int = 100000
    out_dir: str = "runs/default"
    log_every: int = 1000
    zero_shot_fallback: str = "error"  # or "nearest"
    checkpoint_dtype: str = "<f8"
    checkpoint_buffer: str = "all"  # which checkpoints carry the replay buffer: all, final, none

    def __post_init__(self):
        if self.eval_every <= 0:
            raise ConfigError("run.eval_every", "must be positive")
        if not self.seeds:
            raise ConfigError("run.seeds", "must be non-empty")
        if self.steps < 0:
            raise ConfigError("run.steps", "must be >= 0")
        if self.log_every <= 0:
            raise ConfigError("run.log_every", "must be positive")
        if self.zero_shot_fallback not in ("error", "nearest"):
            raise ConfigError("run.zero_shot_fallback", "must be 'error' or 'nearest'")
        if self.checkpoint_dtype not in ("<f8", "<f4"):
            raise ConfigError("run.checkpoint_dtype", "must be '<f8' or '<f4'")
        if self.checkpoint_buffer not in ("all", "final", "none"):
            raise ConfigError("run.checkpoint_buffer", "must be 'all', 'final' or 'none'")


@dataclass
class ExperimentConfig:
    family: FamilyConfig = field(default_factory=FamilyConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    variant: VariantConfig = field(default_factory=VariantConfig)
    sac: TrainConfig = field(default_factory=TrainConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seeds=[seed]))

    def with_out_dir(self, out: str) -> "ExperimentConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, out_dir=out))


_SECTION_TYPES = {"family": FamilyConfig, "embedder": EmbedderConfig, "variant": VariantConfig,
                  "sac": TrainConfig, "run": RunConfig}


def _check_value(key: str, value: Any, hint) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        return _check_value(key, value, inner[0])
    if origin in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        inner = args[0] if args else Any
        out = [_check_value(f"{key}[{i}]", v, inner) for i, v in enumerate(value)]
        return tuple(out) if origin is tuple else out
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(key, f"expected a table, got {value!r}")
        return {k: _check_value(f"{key}.{k}", v, args[1]) for k, v in value.items()}
    return value


def from_dict(raw: dict) -> ExperimentConfig:
    for name in raw:
        if name not in _SECTION_TYPES:
            raise ConfigError(name, f"unknown section; expected one of {sorted(_SECTION_TYPES)}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        body = raw.get(name, {})
        if not isinstance(body, dict):
            raise ConfigError(name, "must be a table")
        hints = typing.get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"{name}.{key}", "unknown key")
            kwargs[key] = _check_value(f"{name}.{key}", value, hints[key])
        try:
            sections[name] = cls(**kwargs)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(name, str(exc)) from None
    return ExperimentConfig(**sections)


def loads(text: str) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"TOML syntax error: {exc}") from None
    return from_dict(raw)


def load(path: str | Path) -> ExperimentConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in sorted(value.items())}
    return value


def to_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for name in _SECTION_TYPES:
        section = getattr(cfg, name)
        body = {}
        for f in fields(section):
            v = getattr(section, f.name)
            if v is None:
                continue
            body[f.name] = _plain(v)
        out[name] = body
    return out


def dumps(cfg: ExperimentConfig) -> str:
    """Canonical text form; ``loads(dumps(c)) == c``."""
    return tomli_w.dumps(to_dict(cfg))


def save(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")
