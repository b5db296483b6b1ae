"""JSON run configuration: five sections mapping onto the config dataclasses.

Sections: scene, dataset, model, train, split.  Every key is optional and
falls back to the dataclass default; unknown sections or keys are rejected
so typos fail loudly.  serialize/parse round-trip to equal configs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError
from .model import ModelConfig
from .synthdata import SceneConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class DatasetParams:
    n_volumes: int = 24
    scans_per_volume: int = 8
    seed: int = 0


@dataclass(frozen=True)
class SplitParams:
    n_splits: int = 10
    n_val: int = 5
    n_test: int = 5
    budgets: tuple = (3, 6, 12, 24)
    seed: int = 0


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    dataset: DatasetParams = field(default_factory=DatasetParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitParams = field(default_factory=SplitParams)


_SECTIONS = {
    "scene": SceneConfig,
    "dataset": DatasetParams,
    "model": ModelConfig,
    "train": TrainConfig,
    "split": SplitParams,
}


def _build_section(name: str, cls, data: dict):
    by_name = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(by_name))
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if isinstance(by_name[k].default, tuple) and isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


def parse_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    out = RunConfig()
    for name, cls in _SECTIONS.items():
        if name in data:
            if not isinstance(data[name], dict):
                raise ConfigError(f"section {name!r} must be an object")
            setattr(out, name, _build_section(name, cls, data[name]))
    return out


def serialize_config(cfg: RunConfig) -> dict:
    return {name: asdict(getattr(cfg, name)) for name in _SECTIONS}


def load_config_file(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(data)


def save_config_file(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(serialize_config(cfg), f, indent=1, sort_keys=True)


def _coerce(field_obj, default, raw: str):
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse {raw!r} as bool")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p for p in raw.split(",") if p]
        elem = type(default[0]) if default else float
        return tuple(elem(p) for p in parts)
    return raw


def apply_override(cfg: RunConfig, dotted_key: str, raw_value: str):
    """Set one `section.key` from a string, e.g. ("train.lr", "0.005")."""
    if "." not in dotted_key:
        raise ConfigError(f"override key must look like section.key, got {dotted_key!r}")
    section, key = dotted_key.split(".", 1)
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    current = getattr(cfg, section)
    by_name = {f.name: f for f in fields(current)}
    if key not in by_name:
        raise ConfigError(f"unknown key {key!r} in section {section!r}")
    try:
        value = _coerce(by_name[key], getattr(current, key), raw_value)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw_value!r} for {dotted_key}: {exc}") from exc
    setattr(cfg, section, replace(current, **{key: value}))
