"""Run configuration: presets, JSON config files and ``--set a.b=v`` overrides.

Precedence is CLI override > config file > preset > built-in defaults.
Every key is checked against the schema; unknown keys are errors.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Optional, Sequence

from .errors import ConfigError
from .train import TrainConfig
from .vit import ModelConfig

PRESETS: dict[str, dict[str, Any]] = {
    "bvit-5m": dict(image_hw=(224, 224), channels=3, patch=16, dim=192, depth=12, heads=3, mlp_ratio=4,
                    num_classes=1000, gamma=1.0, variant="broad_full"),
    "bvit-22m": dict(image_hw=(224, 224), channels=3, patch=16, dim=384, depth=12, heads=6, mlp_ratio=4,
                     num_classes=1000, gamma=1.0, variant="broad_full"),
    # desk-scale model for the synthetic 4-class task
    "bvit-tiny": dict(image_hw=(32, 32), channels=3, patch=8, dim=32, depth=4, heads=2, mlp_ratio=4,
                      num_classes=4, gamma=1.0, variant="broad_full"),
}


@dataclass(frozen=True)
class DataConfig:
    train_path: Optional[str] = None
    eval_path: Optional[str] = None
    synth_seed: int = 0
    synth_noise: int = 128
    synth_train_count: int = 1024
    synth_eval_count: int = 256

    def __post_init__(self):
        if not 0 <= self.synth_noise <= 255:
            raise ConfigError(f"data.synth_noise must be in [0, 255], got {self.synth_noise}")
        if self.synth_train_count < 1 or self.synth_eval_count < 1:
            raise ConfigError("data.synth_*_count must be positive")


@dataclass(frozen=True)
class DiagConfig:
    samples: int = 8

    def __post_init__(self):
        if self.samples < 8:
            raise ConfigError(f"diag.samples must be >= 8, got {self.samples}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    diag: DiagConfig = field(default_factory=DiagConfig)
    out: str = "runs/default"
    preset: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "out": self.out,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": asdict(self.data),
            "diag": asdict(self.diag),
        }


def _defaults(preset: Optional[str]) -> dict:
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    model = ModelConfig(**PRESETS[preset]) if preset else ModelConfig()
    return RunConfig(model=model, preset=preset).to_dict()


def _coerce(key: str, value: Any, default: Any) -> Any:
    if default is None or isinstance(default, str):
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{key}: expected a list of {len(default)} values, got {value!r}")
        return [_coerce(f"{key}[{i}]", v, d) for i, (v, d) in enumerate(zip(value, default))]
    raise ConfigError(f"{key}: unsupported value {value!r}")


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for k, v in update.items():
        key = prefix + k
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{key}: expected an object")
            _merge(base[k], v, key + ".")
        else:
            base[k] = _coerce(key, v, base[k])


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def _nest(path: list[str], value: Any) -> dict:
    out: Any = value
    for part in reversed(path):
        out = {part: out}
    return out


def build(raw: dict) -> RunConfig:
    try:
        return RunConfig(
            model=ModelConfig.from_dict(raw["model"]),
            train=TrainConfig(**raw["train"]),
            data=DataConfig(**raw["data"]),
            diag=DiagConfig(**raw["diag"]),
            out=raw["out"],
            preset=raw["preset"],
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def resolve_config(path: Optional[str] = None, overrides: Sequence[str] = (), seed: Optional[int] = None,
                   out: Optional[str] = None) -> RunConfig:
    """Layer defaults, preset, file and overrides into a validated RunConfig."""
    file_raw: dict = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                file_raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(file_raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    parsed = [parse_override(o) for o in overrides]

    preset = file_raw.get("preset")
    for keypath, value in parsed:
        if keypath == ["preset"]:
            preset = value
    raw = _defaults(preset)
    # preset is already applied; the file's model keys then override it
    _merge(raw, {k: v for k, v in file_raw.items() if k != "preset"})
    for keypath, value in parsed:
        if keypath != ["preset"]:
            _merge(raw, _nest(keypath, value))
    if seed is not None:
        raw["train"]["seed"] = int(seed)
    if out is not None:
        raw["out"] = out
    return build(copy.deepcopy(raw))


def write_resolved(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
