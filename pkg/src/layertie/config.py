"""Run configuration: model, trainer, controller and data sections.

Configs are JSON objects with one sub-object per section.  Command-line
overrides use dotted keys (``trainer.steps=600``); values are parsed as JSON
when possible and fall back to plain strings.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .model import ModelConfig, ModelError
from .qcontrol import ControllerConfig, ControllerError

MODES = ("dynamic", "conventional", "fixed_pattern", "replay")
PATTERNS = ("cycle", "cycle_rev", "sequence", "fixed_custom")


class ConfigError(ValueError):
    pass


@dataclass
class TrainerConfig:
    mode: str = "dynamic"
    steps: int = 4500               # K, counted in optimizer steps
    controller_period: int = 15     # k
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0
    eval_every: int | None = None   # default: once per epoch
    max_eval_batches: int | None = None
    ppl_ceiling: float = 1e6
    no_tie: bool = False
    all_trainable_init: bool = False
    literal_first_transition: bool = False
    pattern: str | None = None
    custom_state: list[int] | None = None
    replay_trajectory: str | None = None
    permutation: list[int] | None = None

    def validate(self) -> "TrainerConfig":
        if self.mode not in MODES:
            raise ConfigError(f"trainer.mode must be one of {MODES}, got {self.mode!r}")
        if self.controller_period < 1:
            raise ConfigError("trainer.controller_period must be >= 1")
        if self.steps < self.controller_period:
            raise ConfigError(
                f"trainer.steps ({self.steps}) must be >= trainer.controller_period "
                f"({self.controller_period})"
            )
        if self.batch_size < 1:
            raise ConfigError("trainer.batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("trainer.lr must be positive")
        if self.eval_every is not None and self.eval_every < 1:
            raise ConfigError("trainer.eval_every must be >= 1")
        if self.ppl_ceiling <= 1:
            raise ConfigError("trainer.ppl_ceiling must exceed 1")
        if self.mode == "fixed_pattern":
            if self.pattern not in PATTERNS:
                raise ConfigError(
                    f"trainer.pattern must be one of {PATTERNS} in fixed_pattern mode, got {self.pattern!r}"
                )
            if self.pattern == "fixed_custom" and not self.custom_state:
                raise ConfigError("trainer.custom_state is required for pattern 'fixed_custom'")
        if self.mode == "replay" and not self.replay_trajectory:
            raise ConfigError("trainer.replay_trajectory is required in replay mode")
        if (self.no_tie or self.all_trainable_init) and self.mode not in ("dynamic", "replay"):
            raise ConfigError("trainer.no_tie and trainer.all_trainable_init need a dynamic or replay mode")
        return self


@dataclass
class DataConfig:
    path: str = "data/shakespeare.txt"
    val_fraction: float = 0.1

    def validate(self) -> "DataConfig":
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"data.val_fraction must lie in (0, 1), got {self.val_fraction}")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        try:
            self.model.validate()
            self.controller.validate()
        except (ModelError, ControllerError) as exc:
            raise ConfigError(str(exc)) from exc
        self.trainer.validate()
        self.data.validate()
        if self.trainer.mode in ("dynamic",) and self.model.n_layers < 2:
            raise ConfigError("model.n_layers must be >= 2 for dynamic mode")
        if self.trainer.permutation is not None and len(self.trainer.permutation) != self.model.n_layers:
            raise ConfigError(
                f"trainer.permutation has length {len(self.trainer.permutation)} "
                f"but model.n_layers is {self.model.n_layers}"
            )
        return self

    def to_dict(self) -> dict:
        return asdict(self)


_SECTION_TYPES = {"model": ModelConfig, "trainer": TrainerConfig,
                  "controller": ControllerConfig, "data": DataConfig}


def _coerce(section: str, name: str, value: Any, tp: Any) -> Any:
    where = f"{section}.{name}"
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if value is None:
        if type(None) in args:
            return None
        raise ConfigError(f"{where} may not be null")
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        return _coerce(section, name, value, inner[0])
    if origin is list:
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where} must be a list of integers, got {value!r}")
        return list(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    return value


def _build(section: str, raw: dict) -> Any:
    cls = _SECTION_TYPES[section]
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown field {section}.{unknown[0]}")
    return cls(**{k: _coerce(section, k, v, hints[k]) for k, v in raw.items()})


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTION_TYPES))
    if unknown:
        raise ConfigError(f"unknown config section {unknown[0]!r}")
    return RunConfig(**{s: _build(s, raw.get(s, {})) for s in _SECTION_TYPES}).validate()


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return raw


def apply_overrides(raw: dict, overrides: Iterable[str]) -> dict:
    out = json.loads(json.dumps(raw))
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"override {item!r} must look like section.field=value")
        section, name = key.split(".", 1)
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section {section!r} in override {item!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        out.setdefault(section, {})[name] = value
    return out
