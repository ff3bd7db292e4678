"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .angular import AngularLossConfig, LambdaSchedule
from .errors import ConfigError
from .models import ModelConfig, preset

# fields that may change between a run and its resumption
_NOT_HASHED = {"epochs", "log_wall_time", "dataset_root"}


@dataclass
class TrainConfig:
    preset: str = "desk-resnet10-basic"
    loss: str = "asoftmax"
    m: int = 4
    anneal: bool = True
    lambda_initial: float = 1000.0
    lambda_floor: float = 5.0
    lambda_decay: float = 0.99
    activation: str = "prelu"
    embedding_dim: int = 0
    optimizer: str = "adamax"
    lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    momentum: float = 0.9
    lr_step_every: int = 0
    lr_step_factor: float = 0.1
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    dataset_root: str = ""
    split_ratio: float = 0.6
    train_count: int = 0
    val_count: int = 0
    stratified: bool = False
    clip_len: int = 16
    input_size: int = 112
    eval_clips: int = 1
    metrics_window: int = 5
    log_wall_time: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.loss not in ("asoftmax", "cross_entropy"):
            raise ConfigError(f"loss must be asoftmax or cross_entropy, got {self.loss!r}")
        if self.optimizer not in ("adamax", "sgd"):
            raise ConfigError(f"optimizer must be adamax or sgd, got {self.optimizer!r}")
        if self.metrics_window < 1 or self.eval_clips < 1:
            raise ConfigError("metrics_window and eval_clips must be >= 1")
        if (self.train_count > 0) != (self.val_count > 0):
            raise ConfigError("set both train_count and val_count, or neither")
        self.loss_config()

    @property
    def learning_rate(self) -> float:
        if self.lr > 0:
            return self.lr
        return 0.002 if self.optimizer == "adamax" else 0.1

    def loss_config(self) -> AngularLossConfig:
        if not self.anneal:
            return AngularLossConfig(self.m)
        schedule = LambdaSchedule(self.lambda_initial, self.lambda_floor, self.lambda_decay)
        return AngularLossConfig(self.m, schedule.at(0), schedule)

    def model_config(self, num_classes: int) -> ModelConfig:
        overrides = dict(activation=self.activation, num_classes=num_classes, head=self.loss,
                         clip_len=self.clip_len, input_size=self.input_size)
        if self.embedding_dim:
            overrides["embedding_dim"] = self.embedding_dim
        return preset(self.preset, **overrides)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def config_hash(self) -> str:
        text = "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n"
                       for f in fields(self) if f.name not in _NOT_HASHED)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(raw: str, kind):
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    try:
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return raw


def parse_config(text: str, **overrides) -> TrainConfig:
    """Parse UTF-8 ``key = value`` lines; ``#`` starts a comment; unknown keys fail."""
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(raw, kinds[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def load_config(path: str | Path | None, **overrides) -> TrainConfig:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return parse_config(text, **overrides)
