"""Run configuration: nested dataclasses loaded from JSON or YAML, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

import yaml

from .data import SynthConfig
from .errors import ConfigError


@dataclass
class ToyBackboneConfig:
    seed: int = 0
    text_layers: int = 4
    text_width: int = 64
    text_heads: int = 4
    image_layers: int = 4
    image_width: int = 64
    image_heads: int = 4
    joint_dim: int = 64
    patch_size: int = 16
    mlp_ratio: int = 4
    zero_visual_pos: bool = False


@dataclass
class ModelConfig:
    r: int = 2
    n: int = 1
    heads: int = 8
    tap_layers: list[int] = field(default_factory=lambda: [6, 12, 18, 24])
    image_size: int = 518
    alpha: float = 0.75
    state_pair: list[str] = field(default_factory=lambda: ["good", "damaged"])
    template: str = "a photo of a"
    dtp_placement: str = "pre"
    attention_scaling: bool = False
    share_heads: bool = False
    pre_vcp: bool = True
    post_vcp: bool = True
    adapter: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"model.alpha must lie in [0, 1], got {self.alpha}")
        if self.r < 1:
            raise ConfigError("model.r must be >= 1")
        if self.n < 0:
            raise ConfigError("model.n must be >= 0")
        if self.heads < 1:
            raise ConfigError("model.heads must be >= 1")
        if self.dtp_placement not in ("pre", "post"):
            raise ConfigError(f"model.dtp_placement must be 'pre' or 'post', got {self.dtp_placement!r}")
        if len(self.state_pair) != 2:
            raise ConfigError("model.state_pair needs two words")


@dataclass
class TrainConfig:
    learning_rate: float = 4e-5
    epochs: int = 10
    batch_size: int = 32
    max_steps: int | None = None
    weight_decay: float = 0.0
    grad_clip: float | None = None
    lr_schedule: str = "constant"
    dtype: str = "float32"
    device: str = "cpu"

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"train.lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"train.dtype must be float32 or float64, got {self.dtype!r}")


@dataclass
class LossConfig:
    focal_gamma: float = 2.0
    dice_smooth: float = 1.0


@dataclass
class DatasetConfig:
    train_root: str | None = None
    eval_root: str | None = None
    train_split: str = "test"
    eval_split: str = "test"


@dataclass
class MetricConfig:
    pro_fpr_limit: float = 0.3
    pro_steps: int | None = None


@dataclass
class RunConfig:
    seed: int = 0
    backbone: str = "toy"
    bpe_vocab: str | None = None
    output_dir: str = "runs"
    toy: ToyBackboneConfig = field(default_factory=ToyBackboneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> None:
        if not (self.backbone == "toy" or self.backbone.startswith("pretrained:")):
            raise ConfigError(f"backbone must be 'toy' or 'pretrained:<path>', got {self.backbone!r}")
        self.model.validate()
        self.train.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(tp, value, key: str):
    origin = get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping")
        return from_dict(tp, value, prefix=f"{key}.")
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list")
        (inner,) = get_args(tp) or (Any,)
        return [_coerce(inner, v, key) for v in value]
    args = get_args(tp)
    if args and type(None) in args:
        if value is None:
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce(inner, value, key)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string")
        return value
    return value


def from_dict(cls, data: dict, prefix: str = ""):
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key {prefix}{key}")
    kwargs = {k: _coerce(hints[k], v, f"{prefix}{k}") for k, v in data.items()}
    return cls(**kwargs)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    cfg = from_dict(RunConfig, data)
    cfg.validate()
    return cfg


def require(value, key: str):
    if value is None:
        raise ConfigError(f"missing required config key {key}")
    return value
