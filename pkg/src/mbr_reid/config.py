"""Run configuration: a JSON document with fixed sections, strict keys and
``section.key=value`` overrides."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

from .data.augment import AugmentationConfig
from .losses import LossWeights
from .trainer import TrainPlan

DATA_ROOT_ENV = "MBR_DATA_ROOT"
PRETRAINED_ENV = "MBR_PRETRAINED_WEIGHTS"


class ConfigError(ValueError):
    """Validation failure; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


@dataclass(frozen=True)
class ArchitectureConfig:
    preset: str = "MBR-4B"
    backbone: str = "resnet50_ibn_a"
    # True: ImageNet weights (path from $MBR_PRETRAINED_WEIGHTS for IBN-a); str: state-dict path
    pretrained: bool | str = True
    heads: int = 4


@dataclass(frozen=True)
class DataConfig:
    root: str | None = None
    layout: str = "veri776"
    P: int = 6
    K: int = 8
    workers: int = 0
    # camera/view counts for side embeddings; None: taken from the train split
    n_cams: int | None = None
    n_views: int | None = None
    augment: AugmentationConfig = AugmentationConfig()


@dataclass(frozen=True)
class EvalConfig:
    cross_camera: bool = True
    use_lai: bool = True
    batch_size: int = 32
    after_training: bool = True


@dataclass(frozen=True)
class RunConfig:
    architecture: ArchitectureConfig = ArchitectureConfig()
    data: DataConfig = DataConfig()
    train: TrainPlan = TrainPlan()
    loss: LossWeights = LossWeights()
    eval: EvalConfig = EvalConfig()
    seed: int = 0
    deterministic: bool = True
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def data_root(self) -> str:
        root = self.data.root or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise ConfigError("data.root", f"not set (and ${DATA_ROOT_ENV} is empty)")
        return root

    def pretrained_source(self) -> bool | str:
        p = self.architecture.pretrained
        if p is True and self.architecture.backbone != "resnet50":
            path = os.environ.get(PRETRAINED_ENV)
            if not path:
                raise ConfigError(
                    "architecture.pretrained",
                    f"{self.architecture.backbone} weights are not bundled; give a path or set ${PRETRAINED_ENV}",
                )
            return path
        return p


def _coerce(value: Any, default: Any, key: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def _build(cls, data: Any, prefix: str = ""):
    default = cls()
    if not isinstance(data, dict):
        raise ConfigError(prefix, f"expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            path = f"{prefix}.{key}" if prefix else key
            raise ConfigError(path, f"unknown key (allowed: {', '.join(sorted(known))})")
    values = {}
    for name, value in data.items():
        path = f"{prefix}.{name}" if prefix else name
        current = getattr(default, name)
        if is_dataclass(current):
            values[name] = _build(type(current), value, path)
        elif current is None or value is None:
            values[name] = tuple(value) if isinstance(value, list) else value
        elif isinstance(value, str) and "str" in str(known[name].type):
            values[name] = value
        else:
            values[name] = _coerce(value, current, path)
    try:
        return replace(default, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix, str(exc)) from exc


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """``["train.epochs=5", "architecture.preset=R50"]`` applied to a raw dict."""
    out = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "cannot override inside a non-object value")
        node[parts[-1]] = _parse_value(text)
    return out


def load_config(path: str | os.PathLike | None = None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"{path}: invalid JSON ({exc})") from exc
    if overrides:
        data = apply_overrides(data, overrides)
    return _build(RunConfig, data)
