"""3D residual network presets wired to an A-softmax or cross-entropy head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .angular import AngularLossConfig, AngularSoftmaxHead, CrossEntropyHead
from .errors import ConfigError, ShapeError
from .nn.autograd import Var
from .nn.layers import (GENRES, BatchNorm3d, BlockSpec, Conv3d, DenseTransition, GlobalAvgPool,
                        Linear, Module, Pool3d, Sequential, activation_slope, build_block,
                        make_activation)
from .tensor import Rng, Tensor, get_dtype


@dataclass(frozen=True)
class ModelConfig:
    genre: str = "basic"
    blocks: tuple[int, ...] = (1, 1, 1, 1)
    base_width: int = 16
    widen: int = 1
    activation: str = "prelu"
    embedding_dim: int = 64
    num_classes: int = 5
    head: str = "asoftmax"
    stem_kernel: tuple[int, int, int] = (3, 7, 7)
    stem_stride: tuple[int, int, int] = (1, 2, 2)
    stem_pool: bool = True
    clip_len: int = 16
    input_size: int = 112

    def validate(self) -> None:
        if self.genre not in GENRES:
            raise ConfigError(f"unknown genre {self.genre!r}")
        if not self.blocks or any(b < 1 for b in self.blocks):
            raise ConfigError(f"every stage needs >= 1 block, got {self.blocks}")
        if self.embedding_dim < 2 or self.num_classes < 1:
            raise ConfigError("embedding_dim must be >= 2 and num_classes >= 1")
        if self.base_width < 1 or self.widen < 1:
            raise ConfigError("base_width and widen must be positive")
        if self.head not in ("asoftmax", "cross_entropy"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.activation not in ("prelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")


_FULL = dict(base_width=64, embedding_dim=512, stem_kernel=(7, 7, 7), stem_stride=(1, 2, 2))
# stem stride 4 in space and 2 in time keeps one CPU core practical
_DESK = dict(base_width=16, embedding_dim=64, stem_kernel=(3, 7, 7), stem_stride=(2, 4, 4))

PRESETS: dict[str, dict] = {
    "desk-resnet10-basic": dict(_DESK, genre="basic", blocks=(1, 1, 1, 1)),
    "desk-resnet18-basic": dict(_DESK, genre="basic", blocks=(2, 2, 2, 2)),
    "desk-resnet10-bottleneck": dict(_DESK, genre="bottleneck", blocks=(1, 1, 1, 1), base_width=8),
    "desk-resnet10-preact": dict(_DESK, genre="preact", blocks=(1, 1, 1, 1), base_width=8),
    "desk-wide10": dict(_DESK, genre="wide", blocks=(1, 1, 1, 1), base_width=8, widen=2),
    "desk-dense10": dict(_DESK, genre="dense-transition", blocks=(2, 2, 2), base_width=8),
    "resnet-18": dict(_FULL, genre="basic", blocks=(2, 2, 2, 2)),
    "resnet-34": dict(_FULL, genre="basic", blocks=(3, 4, 6, 3)),
    "resnet-50": dict(_FULL, genre="bottleneck", blocks=(3, 4, 6, 3)),
    "resnet-101": dict(_FULL, genre="bottleneck", blocks=(3, 4, 23, 3)),
    "resnet-152": dict(_FULL, genre="bottleneck", blocks=(3, 8, 36, 3)),
    "preact-resnet-200": dict(_FULL, genre="preact", blocks=(3, 24, 36, 3)),
    "wide-resnet-50": dict(_FULL, genre="wide", blocks=(3, 4, 6, 3), widen=2),
    "resnext-101": dict(_FULL, genre="dense-transition", blocks=(3, 4, 23, 3), base_width=32),
    "densenet-121": dict(_FULL, genre="dense-transition", blocks=(6, 12, 24, 16), base_width=32),
    "densenet-201": dict(_FULL, genre="dense-transition", blocks=(6, 12, 48, 32), base_width=32),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


class Model(Module):
    """Stem, residual stages, global pooling, linear embedding, loss head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, loss_cfg: AngularLossConfig | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = Rng(seed, 0x30DE1)
        act = cfg.activation
        dense = cfg.genre == "dense-transition"
        stem_width = 2 * cfg.base_width * cfg.widen if dense else cfg.base_width
        stem = [Conv3d(3, stem_width, cfg.stem_kernel, cfg.stem_stride,
                       tuple(k // 2 for k in cfg.stem_kernel), rng=rng, slope=activation_slope(act)),
                BatchNorm3d(stem_width), make_activation(act, stem_width)]
        if cfg.stem_pool:
            stem.append(Pool3d("max", 3, 2, 1))
        self.stem = self.add_child("stem", Sequential(*stem))

        stages, channels = [], stem_width
        for i, count in enumerate(cfg.blocks):
            layers: list[Module] = []
            if dense:
                growth = cfg.base_width * cfg.widen
                for _ in range(count):
                    spec = BlockSpec("dense-transition", channels, growth, 1, act)
                    layers.append(build_block(spec, rng))
                    channels = spec.out_channels
                if i < len(cfg.blocks) - 1:
                    layers.append(DenseTransition(channels, channels // 2, act, rng))
                    channels //= 2
            else:
                planes = cfg.base_width * cfg.widen * 2 ** i
                for j in range(count):
                    spec = BlockSpec(cfg.genre, channels, planes, 2 if (i > 0 and j == 0) else 1, act)
                    layers.append(build_block(spec, rng))
                    channels = spec.out_channels
            stages.append(self.add_child(f"stage{i}", Sequential(*layers)))
        self.stages = stages
        tail: list[Module] = []
        if cfg.genre == "preact" or dense:
            tail += [BatchNorm3d(channels), make_activation(act, channels)]
        tail.append(GlobalAvgPool())
        self.tail = self.add_child("tail", Sequential(*tail))
        self.embed = self.add_child("embed", Linear(channels, cfg.embedding_dim, bias=True, rng=rng))
        if cfg.head == "asoftmax":
            head = AngularSoftmaxHead(cfg.embedding_dim, cfg.num_classes, loss_cfg or AngularLossConfig(), rng)
        else:
            head = CrossEntropyHead(cfg.embedding_dim, cfg.num_classes, rng)
        self.head = self.add_child("head", head)
        self.feature_channels = channels
        self.trace = self.trace_shapes((1, 3, cfg.clip_len, cfg.input_size, cfg.input_size))

    @property
    def backbone(self) -> list[tuple[str, Module]]:
        return ([("stem", self.stem)] + [(f"stage{i}", s) for i, s in enumerate(self.stages)]
                + [("tail", self.tail), ("embed", self.embed)])

    def trace_shapes(self, shape: tuple[int, ...]) -> list[tuple[str, tuple[int, ...]]]:
        """Propagate dims layer by layer without computing anything."""
        trace = [("input", tuple(shape))]
        for name, mod in self.backbone:
            if isinstance(mod, Sequential):
                for k, layer in enumerate(mod.layers):
                    shape = layer.output_shape(shape)
                    trace.append((f"{name}.{k}", shape))
            else:
                shape = mod.output_shape(shape)
                trace.append((name, shape))
        return trace

    @property
    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def _input(self, clips) -> Var:
        if isinstance(clips, Var):
            return clips
        arr = clips.numpy() if isinstance(clips, Tensor) else np.asarray(clips)
        expected = self.trace[0][1][1:]
        if arr.ndim != 5 or arr.shape[1:] != expected:
            raise ShapeError(f"model expects B x {' x '.join(map(str, expected))} clips, got {arr.shape}")
        return Var(arr.astype(self.embed.weight.value.dtype, copy=False))

    def features(self, clips) -> Var:
        x = self._input(clips)
        for _, mod in self.backbone:
            x = mod(x)
        return x

    def forward(self, clips) -> tuple[np.ndarray, np.ndarray]:
        emb = self.features(clips).value
        return emb, self.head.logits(emb)

    def predict(self, clips) -> np.ndarray:
        return self.head.predict(self.features(clips).value)

    def loss(self, clips, labels: np.ndarray) -> Var:
        return self.head.loss(self.features(clips), np.asarray(labels))


def build_model(cfg: ModelConfig, seed: int = 0, loss_cfg: AngularLossConfig | None = None) -> Model:
    return Model(cfg, seed, loss_cfg)
