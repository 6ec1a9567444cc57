"""Flat ``section.field=value`` configuration for the end-to-end pipeline.

Sections map onto the library's parameter dataclasses (``bank``,
``network``, ``train``, ``phantom``, ``corruption``) plus a few pipeline
keys. Unknown keys are rejected, and :func:`to_entries` renders every key
so the resolved copy written next to a run can be fed back in unchanged.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .filterbank import BankParams
from .invnet import NetworkConfig, TrainConfig
from .io import read_keyvalue, write_keyvalue
from .phantom import CorruptionSpec, PhantomSpec

_SECTIONS = {
    "bank": BankParams,
    "network": NetworkConfig,
    "train": TrainConfig,
    "phantom": PhantomSpec,
    "corruption": CorruptionSpec,
}


@dataclass(frozen=True)
class PipelineSettings:
    train_enabled: bool = True
    checkpoint: str | None = None  # load weights from here instead of training
    model_seed: int = 0
    registration_window: int = 8
    registration_margin: int = 8  # ROI dilation (px) for registration and SNR background
    reference_td: int | None = None  # None picks the highest-energy TD

    def __post_init__(self):
        if self.registration_window < 0 or self.registration_margin < 0:
            raise ConfigError("registration window and margin must be >= 0")
        if not self.train_enabled and not self.checkpoint:
            raise ConfigError("pipeline.train_enabled=false requires pipeline.checkpoint")


@dataclass(frozen=True)
class PipelineConfig:
    bank: BankParams = field(default_factory=BankParams)
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(base_channels=8))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(iterations=2000, batch_size=8))
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Copy with every seed (phantom, corruption, training, model init) set to ``seed``."""
        return replace(self, phantom=replace(self.phantom, seed=seed),
                       corruption=replace(self.corruption, seed=seed),
                       train=replace(self.train, seed=seed),
                       pipeline=replace(self.pipeline, model_seed=seed))


_ALL_SECTIONS = {**_SECTIONS, "pipeline": PipelineSettings}


def _hints(cls):
    return typing.get_type_hints(cls)


def _parse_value(key: str, text: str, hint):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if text.lower() in ("none", ""):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _parse_value(key, text, inner)
    if origin is tuple:
        parts = [p for p in text.replace(" ", "").split(",") if p]
        item = args[0]
        try:
            return tuple(item(p) for p in parts)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {text!r} as a tuple of {item.__name__}") from exc
    if hint is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if hint is int:
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from exc
    if hint is float:
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from exc
    if hint is str:
        return text
    raise ConfigError(f"{key}: unsupported field type {hint}")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def known_keys() -> list[str]:
    return [f"{sec}.{f.name}" for sec, cls in _ALL_SECTIONS.items() for f in fields(cls)]


def from_entries(entries: dict[str, str], base: PipelineConfig | None = None) -> PipelineConfig:
    """Apply ``section.field`` overrides to ``base`` (defaults if omitted)."""
    base = base or PipelineConfig()
    updates: dict[str, dict] = {}
    for key, text in entries.items():
        sec, _, name = key.partition(".")
        cls = _ALL_SECTIONS.get(sec)
        if cls is None or name not in {f.name for f in fields(cls)}:
            raise ConfigError(f"unknown config key {key!r}")
        updates.setdefault(sec, {})[name] = _parse_value(key, text, _hints(cls)[name])
    out = {}
    for sec in _ALL_SECTIONS:
        current = getattr(base, sec)
        try:
            out[sec] = replace(current, **updates.get(sec, {}))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid [{sec}] settings: {exc}") from exc
    return PipelineConfig(**out)


def to_entries(cfg: PipelineConfig) -> dict[str, str]:
    out = {}
    for sec in _ALL_SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            out[f"{sec}.{f.name}"] = _format_value(getattr(obj, f.name))
    return out


def load_config(path, overrides: dict[str, str] | None = None) -> PipelineConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    entries = read_keyvalue(p)
    entries.update(overrides or {})
    return from_entries(entries)


def write_config(path, cfg: PipelineConfig) -> None:
    write_keyvalue(path, to_entries(cfg))


def as_dict(obj) -> dict:
    return dataclasses.asdict(obj)
