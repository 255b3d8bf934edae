"""Experiment configuration and its flat ``key=value`` text form.

Nested sections map to dotted keys, e.g. ``trainer.delta=0.075``.  Tuples
are written comma-separated.
"""

from __future__ import annotations

import dataclasses
import enum
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

from .losses import DistillConfig
from .optim import TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "spirals"  # spirals | blobs | csv
    num_classes: int = 3
    points_per_class: int = 500
    noise: float = 0.2
    turns: float = 1.0
    center_spread: float = 10.0
    cluster_std: float = 0.5
    path: str = ""
    train_fraction: float = 0.8
    seed: int = 0


@dataclass(frozen=True)
class TeacherConfig:
    hidden: Tuple[int, ...] = (128, 128)
    epochs: int = 200


@dataclass(frozen=True)
class StudentConfig:
    hidden: Tuple[int, ...] = (8,)


@dataclass(frozen=True)
class TrainerSection:
    kind: str = "dot"  # vanilla | dot
    lr: float = 0.05
    momentum: float = 0.9
    delta: float = 0.075
    weight_decay: float = 0.0
    decay_task_share: float = 1.0
    milestones: Tuple[int, ...] = (100, 150)
    lr_decay: float = 0.1

    def optimizer(self) -> TrainerConfig:
        return TrainerConfig(
            learning_rate=self.lr,
            momentum=self.momentum,
            delta=self.delta if self.kind == "dot" else 0.0,
            weight_decay=self.weight_decay,
            decay_task_share=self.decay_task_share,
        )


@dataclass(frozen=True)
class DiagnosticsConfig:
    cosines: bool = True
    landscape: bool = True
    fidelity: bool = True
    landscape_radii: Tuple[float, ...] = tuple(round(-1.0 + 0.1 * i, 10) for i in range(21))
    sharpness_directions: int = 10
    sharpness_radius: float = 0.5


@dataclass(frozen=True)
class ToyConfig:
    delta: float = 0.075
    steps: int = 2000
    lr: float = 0.1
    momentum: float = 0.9
    temperature: float = 1.0
    teacher_prob: float = 0.7
    alpha: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)
    epochs: int = 200
    batch_size: int = 64
    seeds: Tuple[int, ...] = (0,)
    out: str = "runs"

    def validate(self) -> "ExperimentConfig":
        if self.epochs < 1 or self.teacher.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.trainer.kind not in ("vanilla", "dot"):
            raise ConfigError(f"trainer.kind must be 'vanilla' or 'dot', got {self.trainer.kind!r}")
        if self.dataset.kind not in ("spirals", "blobs", "csv"):
            raise ConfigError(f"unknown dataset.kind {self.dataset.kind!r}")
        if self.dataset.kind == "csv" and not self.dataset.path:
            raise ConfigError("dataset.kind=csv needs dataset.path")
        if 0.0 not in self.diagnostics.landscape_radii:
            raise ConfigError("diagnostics.landscape_radii must include 0")
        try:
            self.trainer.optimizer()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def replace(self, **flat: Any) -> "ExperimentConfig":
        """Copy with dotted-key overrides given as already-typed values."""
        return _with_overrides(self, {k.replace("__", "."): v for k, v in flat.items()})


# ---------------------------------------------------------------------------
# flat text form


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def _parse_value(text: str, hint: Any, key: str) -> Any:
    text = text.strip()
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if isinstance(hint, type) and issubclass(hint, enum.Enum):
            return hint(text)
        if origin is tuple:
            (inner, *_rest) = typing.get_args(hint)
            return tuple(_parse_value(part, inner, key) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {hint}") from exc
    raise ConfigError(f"{key}: unsupported field type {hint}")


def to_flat(cfg: Any, prefix: str = "") -> Dict[str, str]:
    flat: Dict[str, str] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            flat.update(to_flat(value, key + "."))
        else:
            flat[key] = _format_value(value)
    return flat


def _with_overrides(cfg: Any, overrides: Mapping[str, Any], prefix: str = "", parse: bool = False) -> Any:
    hints = typing.get_type_hints(type(cfg))
    changes = {}
    names = {f.name for f in dataclasses.fields(cfg)}
    for key in overrides:
        if not key.startswith(prefix):
            continue
        head = key[len(prefix):].split(".", 1)[0]
        if head not in names:
            raise ConfigError(f"unknown config key {key!r}")
    for f in dataclasses.fields(cfg):
        key = f"{prefix}{f.name}"
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            if any(k.startswith(key + ".") for k in overrides):
                changes[f.name] = _with_overrides(value, overrides, key + ".", parse)
            elif key in overrides:
                raise ConfigError(f"{key} is a section, set one of its keys instead")
        elif key in overrides:
            raw = overrides[key]
            changes[f.name] = _parse_value(raw, hints[f.name], key) if parse else raw
    if not changes:
        return cfg
    try:
        return dataclasses.replace(cfg, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_lines(lines: Iterable[str]) -> Dict[str, str]:
    entries: Dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def from_flat(entries: Mapping[str, str], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    base = ExperimentConfig() if base is None else base
    return _with_overrides(base, dict(entries), parse=True).validate()


def load_config(path=None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    entries: Dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        entries.update(parse_lines(text.splitlines()))
    entries.update(parse_lines(overrides))
    return from_flat(entries)


def dumps_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in sorted(to_flat(cfg).items()))
