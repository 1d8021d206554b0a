"""Run configuration: dataclass defaults, YAML/JSON files and schema validation.

Precedence when resolving: command-line flags > config file > defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import yaml

from .loss import SanCEConfig
from .segmodel import config_hash


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    name: str = "tiny"
    widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    head_init: str = "zero"


@dataclass
class ReplayConfig:
    k_per_class: int = 10
    n_per_source: int = 1
    theta: float | None = None  # None -> 0.5 * ln(C)
    per_class_cap: int | None = None
    max_items: int | None = None  # cap on the accumulated replay set
    generator: str = "jitter_warp"


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs_first: int = 30
    epochs_later: int = 15
    lr_first: float = 1e-2
    lr_later: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "poly"  # "poly" or "constant"
    hflip: bool = True
    resized_crop: bool = True
    crop_scale: tuple[float, float] = (0.5, 1.0)
    label_policy: str = "keep"
    include_background: bool = False
    eval_batch_size: int = 32
    seed: int = 0
    loss: SanCEConfig = field(default_factory=SanCEConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if min(self.epochs_first, self.epochs_later) < 1:
            raise ConfigError("epochs must be positive")
        if min(self.lr_first, self.lr_later) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lr_schedule not in ("poly", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        self.crop_scale = tuple(self.crop_scale)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["crop_scale"] = list(self.crop_scale)
        d["loss"].pop("cur_step")
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainConfig":
        data = dict(data)
        validate_config(data)
        nested = {
            "loss": SanCEConfig,
            "replay": ReplayConfig,
            "model": ModelConfig,
        }
        kwargs = {}
        for f in fields(cls):
            if f.name not in data:
                continue
            v = data[f.name]
            if f.name in nested:
                v = nested[f.name](**v)
            kwargs[f.name] = v
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def config_schema() -> dict[str, Any]:
    return json.loads(resources.files("endocss").joinpath("data/config_schema.json").read_text())


def validate_config(data: Mapping[str, Any], section: str | None = "train") -> None:
    """Validate a ``train`` section (default) or a whole config file (``section=None``)."""
    schema = config_schema()
    if section is not None:
        schema = {"$ref": f"#/$defs/{section}", "$defs": schema["$defs"]}
    try:
        jsonschema.validate(dict(data), schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None


def read_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    validate_config(data, section=None)
    return data


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(file_data: Mapping[str, Any] | None = None, overrides: Mapping[str, Any] | None = None) -> TrainConfig:
    """Defaults, then the file's ``train`` section, then flag overrides."""
    merged = TrainConfig().to_dict()
    if file_data:
        merged = deep_merge(merged, file_data.get("train", {}))
    if overrides:
        merged = deep_merge(merged, {k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(merged)


def toy_config(**overrides: Any) -> TrainConfig:
    """Settings sized for CPU runs on the synthetic shapes data."""
    base = TrainConfig(
        epochs_first=10,
        epochs_later=5,
        lr_first=0.05,
        lr_later=0.01,
        replay=ReplayConfig(k_per_class=10, n_per_source=1),
    )
    return TrainConfig.from_dict(deep_merge(base.to_dict(), overrides))

