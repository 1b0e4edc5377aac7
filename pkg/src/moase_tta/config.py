"""Experiment configuration: dataclass sections, JSON/YAML loading and environment overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

import yaml

from .augment import CORRUPTIONS, MAX_SEVERITY, AugmentConfig
from .daopd import BENCHMARK_PRESETS, DaopdConfig, TrainerConfig
from .diagnostics import DiagnosticsConfig
from .model import BackboneConfig
from .numeric import DomainError
from .sdd import ExpertSpec

ENV_PREFIX = "MOASE_TTA__"


class ConfigError(Exception):
    """Raised for invalid configuration; `field_path` names the offending key."""

    def __init__(self, message: str, *, field_path: str) -> None:
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


@dataclass(slots=True)
class DomainSpec:
    """One stream segment: a corruption family at a severity for `duration` batches."""

    name: str
    family: str
    severity: int = MAX_SEVERITY
    duration: int = 50

    def validate(self, path: str = "domain") -> None:
        if self.family not in CORRUPTIONS:
            raise ConfigError(
                f"unknown family {self.family!r}; choose from {sorted(CORRUPTIONS)}", field_path=f"{path}.family"
            )
        if not 1 <= self.severity <= MAX_SEVERITY:
            raise ConfigError(f"severity must lie in [1, {MAX_SEVERITY}]", field_path=f"{path}.severity")
        if self.duration < 1:
            raise ConfigError("duration must be >= 1", field_path=f"{path}.duration")


def default_domains(duration: int = 50, severity: int = MAX_SEVERITY) -> list[DomainSpec]:
    """A clean domain, then five corruptions at full severity; the stream ends on a shifted domain."""
    families = ("identity", "gauss-noise", "smooth", "contrast", "brightness", "occlude")
    return [DomainSpec(name=f, family=f, severity=severity, duration=duration) for f in families]


def named_stream(name: str, duration: int = 50) -> list[DomainSpec]:
    """`default` for the full sequence, or a single corruption family by name."""
    if name == "default":
        return default_domains(duration)
    if name not in CORRUPTIONS:
        raise ConfigError(f"unknown stream {name!r}", field_path="stream.domains")
    return [DomainSpec(name=name, family=name, duration=duration)]


@dataclass(slots=True)
class StreamConfig:
    """Gaussian class-blob task plus the ordered, cycled domain sequence."""

    seed: int = 1
    classes: int = 4
    input_dim: int = 16
    separation: float = 4.0
    noise_std: float = 1.0
    batch_size: int = 40
    rounds: int = 1
    domains: list[DomainSpec] = field(default_factory=default_domains)

    def validate(self) -> None:
        if self.classes < 2:
            raise ConfigError("classes must be >= 2", field_path="stream.classes")
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1", field_path="stream.input_dim")
        if self.separation < 0 or self.noise_std <= 0:
            raise ConfigError("need separation >= 0 and noise_std > 0", field_path="stream.separation")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", field_path="stream.batch_size")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1", field_path="stream.rounds")
        if not self.domains:
            raise ConfigError("the domain sequence is empty", field_path="stream.domains")
        for i, spec in enumerate(self.domains):
            spec.validate(f"stream.domains[{i}]")


@dataclass(slots=True)
class PretrainConfig:
    """Supervised source training on clean blobs."""

    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-2
    target_accuracy: float = 0.95
    eval_every: int = 100
    validation_samples: int = 1000

    def validate(self) -> None:
        for name in ("steps", "batch_size", "eval_every", "validation_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", field_path=f"pretrain.{name}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0", field_path="pretrain.learning_rate")
        if not 0.0 < self.target_accuracy <= 1.0:
            raise ConfigError("target_accuracy must lie in (0, 1]", field_path="pretrain.target_accuracy")


@dataclass(slots=True)
class ExperimentConfig:
    model: BackboneConfig = field(default_factory=BackboneConfig)
    daopd: DaopdConfig = field(default_factory=DaopdConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def validate(self) -> None:
        for section in SECTIONS:
            value = getattr(self, section)
            try:
                value.validate()
            except DomainError as exc:
                raise ConfigError(str(exc), field_path=section) from exc
        if self.model.input_dim != self.stream.input_dim:
            raise ConfigError(
                f"model.input_dim={self.model.input_dim} but stream.input_dim={self.stream.input_dim}",
                field_path="model.input_dim",
            )
        if self.model.classes != self.stream.classes:
            raise ConfigError(
                f"model.classes={self.model.classes} but stream.classes={self.stream.classes}",
                field_path="model.classes",
            )

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {}
        for section in SECTIONS:
            value = getattr(self, section)
            if section == "model":
                data[section] = value.to_dict()
                continue
            entries = {f.name: getattr(value, f.name) for f in fields(value)}
            if section == "stream":
                entries["domains"] = [
                    {"name": d.name, "family": d.family, "severity": d.severity, "duration": d.duration}
                    for d in value.domains
                ]
            data[section] = entries
        return data


SECTIONS: dict[str, type] = {
    "model": BackboneConfig,
    "daopd": DaopdConfig,
    "augment": AugmentConfig,
    "stream": StreamConfig,
    "trainer": TrainerConfig,
    "diagnostics": DiagnosticsConfig,
    "pretrain": PretrainConfig,
}


def _coerce(value: Any, default: Any, path: str) -> Any:
    """Check `value` against the type of the field default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", field_path=path)
        return value
    if isinstance(default, Enum):
        try:
            return type(default)(value)
        except ValueError:
            raise ConfigError(f"unknown value {value!r}", field_path=path) from None
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", field_path=path)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", field_path=path)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", field_path=path)
        return value
    return value


def _expert_specs(raw: Any, path: str) -> list[ExpertSpec] | None:
    if raw is None:
        return None
    if not isinstance(raw, list):
        raise ConfigError("expected a list of experts", field_path=path)
    specs = []
    for i, item in enumerate(raw):
        item_path = f"{path}[{i}]"
        if not isinstance(item, Mapping):
            raise ConfigError("expected a mapping", field_path=item_path)
        unknown = set(item) - {"polarity", "keep_ratio", "rank"}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", field_path=f"{item_path}.{sorted(unknown)[0]}")
        try:
            specs.append(
                ExpertSpec(item.get("polarity", "top"), float(item.get("keep_ratio", 0.5)), int(item.get("rank", 1)))
            )
        except (DomainError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc), field_path=item_path) from exc
    return specs


def _domain_specs(raw: Any, path: str) -> list[DomainSpec]:
    if not isinstance(raw, list):
        raise ConfigError("expected a list of domains", field_path=path)
    domains = []
    for i, item in enumerate(raw):
        item_path = f"{path}[{i}]"
        if isinstance(item, str):
            item = {"name": item, "family": item}
        if not isinstance(item, Mapping):
            raise ConfigError("expected a mapping or a family name", field_path=item_path)
        unknown = set(item) - {"name", "family", "severity", "duration"}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", field_path=f"{item_path}.{sorted(unknown)[0]}")
        family = item.get("family")
        if not isinstance(family, str):
            raise ConfigError("family is required", field_path=f"{item_path}.family")
        spec = DomainSpec(
            name=str(item.get("name", family)),
            family=family,
            severity=_coerce(item.get("severity", MAX_SEVERITY), MAX_SEVERITY, f"{item_path}.severity"),
            duration=_coerce(item.get("duration", 50), 50, f"{item_path}.duration"),
        )
        spec.validate(item_path)
        domains.append(spec)
    return domains


def build_section(name: str, raw: Mapping[str, Any] | None, base: Any | None = None) -> Any:
    """Apply `raw` over `base` (or the section defaults), rejecting unknown keys."""
    cls = SECTIONS[name]
    base = base if base is not None else cls()
    if raw is None:
        return base
    if not isinstance(raw, Mapping):
        raise ConfigError("expected a mapping", field_path=name)
    known = {f.name for f in fields(cls)}
    updates: dict[str, Any] = {}
    for key, value in raw.items():
        path = f"{name}.{key}"
        if key not in known:
            raise ConfigError("unknown key", field_path=path)
        if name == "model" and key == "experts":
            updates[key] = _expert_specs(value, path)
        elif name == "stream" and key == "domains":
            updates[key] = _domain_specs(value, path)
        elif name == "model" and key == "agnostic_experts":
            updates[key] = None if value is None else _coerce(value, 0, path)
        else:
            updates[key] = _coerce(value, getattr(base, key), path)
    return replace(base, **updates)


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, dict[str, Any]]:
    """Collect `MOASE_TTA__SECTION__FIELD=value` pairs; values are parsed as YAML scalars."""
    environ = os.environ if environ is None else environ
    overrides: dict[str, dict[str, Any]] = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        parts = key[len(ENV_PREFIX) :].lower().split("__")
        if len(parts) != 2 or parts[0] not in SECTIONS:
            raise ConfigError(f"malformed override {key}", field_path=".".join(parts))
        overrides.setdefault(parts[0], {})[parts[1]] = yaml.safe_load(raw)
    return overrides


def _read_document(path: Path) -> dict[str, Any]:
    if not path.exists():
        raise ConfigError("config file not found", field_path=str(path))
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}", field_path=str(path)) from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", field_path=str(path))
    return data


def load_config(
    path: Path | None = None,
    *,
    preset: str | None = None,
    environ: Mapping[str, str] | None = None,
) -> ExperimentConfig:
    """Defaults, then the preset, then the file, then environment overrides.

    A preset sets the DA-OPD profile and the benchmark student learning rate.
    """
    document = _read_document(path) if path is not None else {}
    for key in document:
        if key not in SECTIONS:
            raise ConfigError("unknown section", field_path=key)
    overrides = env_overrides(environ)
    if preset is not None and preset not in BENCHMARK_PRESETS:
        raise ConfigError(f"unknown preset {preset!r}", field_path="preset")

    sections: dict[str, Any] = {}
    for name in SECTIONS:
        base = None
        if name == "daopd" and preset is not None:
            base = DaopdConfig.preset(preset)
        elif name == "trainer" and preset is not None:
            base = TrainerConfig.benchmark()
        section = build_section(name, document.get(name), base)
        sections[name] = build_section(name, overrides.get(name), section)
    config = ExperimentConfig(**sections)
    config.validate()
    return config
