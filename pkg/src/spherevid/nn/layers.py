"""Parameterized layers and residual blocks built on the tape.

A module's ``__call__`` takes and returns :class:`Var`. ``output_shape``
propagates dims without touching data, which is how models dry-run at
construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..errors import ConfigError, ShapeError
from ..tensor import Rng, get_dtype
from . import functional as F
from .autograd import Parameter, Var, add, concat_channels, record


class Module:
    training = True

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(value, name)
        self._params[name] = p
        return p

    def add_child(self, name: str, child: "Module") -> "Module":
        self._children[name] = child
        return child

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def __call__(self, x: Var) -> Var:
        raise NotImplementedError


def he_std(fan_in: int, slope: float = 0.0) -> float:
    """Fan-in scaled std with the rectifier gain ``2 / (1 + a^2)``."""
    return float(np.sqrt(2.0 / ((1.0 + slope ** 2) * fan_in)))


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel=3, stride=1, padding=0,
                 bias: bool = False, rng: Rng | None = None, slope: float = 0.0):
        super().__init__()
        self.kernel, self.stride, self.padding = F.triple(kernel), F.triple(stride), F.triple(padding)
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0 or cin < 1 or cout < 1:
            raise ConfigError(f"invalid conv3d: {cin}->{cout} k={self.kernel} s={self.stride} p={self.padding}")
        fan_in = cin * int(np.prod(self.kernel))
        rng = rng or Rng(0)
        w = rng.normal((cout, cin, *self.kernel), 0.0, he_std(fan_in, slope))
        self.weight = self.add_param("weight", w.astype(get_dtype()))
        self.bias = self.add_param("bias", np.zeros(cout, dtype=get_dtype())) if bias else None

    def output_shape(self, shape):
        b, c, *spatial = shape
        if c != self.weight.value.shape[1]:
            raise ShapeError(f"conv3d expects {self.weight.value.shape[1]} channels, got {c}")
        return (b, self.weight.value.shape[0],
                *F.out_extents(spatial, self.kernel, self.stride, self.padding))

    def __call__(self, x: Var) -> Var:
        w, b = self.weight, self.bias
        out, cache = F.conv3d_forward(x.value, w.value, b.value if b else None,
                                      self.stride, self.padding)

        def backward(g):
            gx, gw, gb = F.conv3d_backward(g, cache, need_input_grad=x.requires_grad)
            w.accumulate(gw)
            if b is not None:
                b.accumulate(gb)
            return (gx,)

        return record("conv3d", (x,), out, backward, has_params=True)


class BatchNorm3d(Module):
    """Per-channel batch normalization; also accepts ``B x C`` input."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        if not 0 < momentum <= 1 or eps <= 0:
            raise ConfigError("batchnorm needs momentum in (0, 1] and eps > 0")
        dt = get_dtype()
        self.gamma = self.add_param("gamma", np.ones(channels, dtype=dt))
        self.beta = self.add_param("beta", np.zeros(channels, dtype=dt))
        self._buffers["running_mean"] = np.zeros(channels, dtype=dt)
        self._buffers["running_var"] = np.ones(channels, dtype=dt)
        self.momentum, self.eps = momentum, eps

    def __call__(self, x: Var) -> Var:
        gamma, beta = self.gamma, self.beta
        out, cache = F.batchnorm_forward(
            x.value, gamma.value, beta.value, self._buffers["running_mean"],
            self._buffers["running_var"], self.momentum, self.eps, self.training)

        def backward(g):
            gx, gg, gb = F.batchnorm_backward(g, cache)
            gamma.accumulate(gg)
            beta.accumulate(gb)
            return (gx,)

        return record("batchnorm", (x,), out, backward, has_params=True)


class PReLU(Module):
    def __init__(self, channels: int, init: float = 0.25):
        super().__init__()
        self.init = init
        self.slope = self.add_param("slope", np.full(channels, init, dtype=get_dtype()))

    def __call__(self, x: Var) -> Var:
        a = self.slope
        out, cache = F.prelu_forward(x.value, a.value)

        def backward(g):
            gx, ga = F.prelu_backward(g, cache)
            a.accumulate(ga)
            return (gx,)

        return record("prelu", (x,), out, backward, has_params=True)


class ReLU(Module):
    init = 0.0

    def __call__(self, x: Var) -> Var:
        out, mask = F.relu_forward(x.value)
        return record("relu", (x,), out, lambda g: (F.relu_backward(g, mask),))


def make_activation(kind: str, channels: int) -> Module:
    if kind == "prelu":
        return PReLU(channels)
    if kind == "relu":
        return ReLU()
    raise ConfigError(f"unknown activation {kind!r}")


def activation_slope(kind: str) -> float:
    return 0.25 if kind == "prelu" else 0.0


class Pool3d(Module):
    def __init__(self, kind: str, window, stride=None, padding=0):
        super().__init__()
        if kind not in ("max", "avg"):
            raise ConfigError(f"unknown pool kind {kind!r}")
        self.kind = kind
        self.window = F.triple(window)
        self.stride = F.triple(stride if stride is not None else window)
        self.padding = F.triple(padding)

    def output_shape(self, shape):
        b, c, *spatial = shape
        return (b, c, *F.out_extents(spatial, self.window, self.stride, self.padding))

    def __call__(self, x: Var) -> Var:
        out, cache = F.pool3d_forward(x.value, self.kind, self.window, self.stride, self.padding)
        return record(f"{self.kind}pool3d", (x,), out, lambda g: (F.pool3d_backward(g, cache),))


class GlobalAvgPool(Module):
    def output_shape(self, shape):
        return shape[:2]

    def __call__(self, x: Var) -> Var:
        out, xshape = F.global_avg_pool_forward(x.value)
        return record("global_avg_pool", (x,), out,
                      lambda g: (F.global_avg_pool_backward(g, xshape),))


class Linear(Module):
    def __init__(self, din: int, dout: int, bias: bool = True, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        bound = 1.0 / np.sqrt(din)
        self.weight = self.add_param("weight", rng.uniform((din, dout), -bound, bound).astype(get_dtype()))
        self.bias = self.add_param("bias", np.zeros(dout, dtype=get_dtype())) if bias else None

    def output_shape(self, shape):
        if len(shape) != 2 or shape[1] != self.weight.value.shape[0]:
            raise ShapeError(f"linear expects (B, {self.weight.value.shape[0]}), got {shape}")
        return (shape[0], self.weight.value.shape[1])

    def __call__(self, x: Var) -> Var:
        w, b = self.weight, self.bias
        out, cache = F.linear_forward(x.value, w.value, b.value if b else None)

        def backward(g):
            gx, gw, gb = F.linear_backward(g, cache)
            w.accumulate(gw)
            if b is not None:
                b.accumulate(gb)
            return (gx,)

        return record("linear", (x,), out, backward, has_params=True)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            self.add_child(str(i), layer)

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def __call__(self, x: Var) -> Var:
        for layer in self.layers:
            x = layer(x)
        return x


# ---------------------------------------------------------------------------
# residual blocks
# ---------------------------------------------------------------------------

GENRES = ("basic", "bottleneck", "preact", "wide", "dense-transition")
EXPANSION = {"basic": 1, "bottleneck": 4, "preact": 4, "wide": 2}


@dataclass(frozen=True)
class BlockSpec:
    """Channel plan of one block.

    ``planes`` is the inner width; the output width is ``planes`` times the
    genre's expansion. For ``dense-transition`` ``planes`` is the growth rate
    and the block concatenates rather than sums.
    """

    genre: str
    in_channels: int
    planes: int
    stride: int = 1
    activation: str = "prelu"

    @property
    def out_channels(self) -> int:
        if self.genre == "dense-transition":
            return self.in_channels + self.planes
        return self.planes * EXPANSION[self.genre]

    def validate(self) -> None:
        if self.genre not in GENRES:
            raise ConfigError(f"unknown block genre {self.genre!r}")
        if self.in_channels < 1 or self.planes < 1 or self.stride < 1:
            raise ConfigError(f"impossible channel plan: {self}")
        if self.genre == "dense-transition" and self.stride != 1:
            raise ConfigError("dense layers keep resolution; downsample with DenseTransition")


def _conv(cin, cout, k, stride, rng, act):
    pad = k // 2
    return Conv3d(cin, cout, k, stride, pad, rng=rng, slope=activation_slope(act))


class ResidualBlock(Module):
    """Post-activation basic / bottleneck / wide block.

    ``out = act(main(x) + skip(x))`` where ``skip`` is the identity unless
    channels or stride change, in which case it is a 1x1x1 conv + BN.
    """

    def __init__(self, spec: BlockSpec, rng: Rng):
        super().__init__()
        spec.validate()
        self.spec = spec
        act, cin, p, s = spec.activation, spec.in_channels, spec.planes, spec.stride
        cout = spec.out_channels
        if spec.genre == "basic":
            layers = [_conv(cin, p, 3, s, rng, act), BatchNorm3d(p), make_activation(act, p),
                      _conv(p, p, 3, 1, rng, act), BatchNorm3d(p)]
        else:
            layers = [_conv(cin, p, 1, 1, rng, act), BatchNorm3d(p), make_activation(act, p),
                      _conv(p, p, 3, s, rng, act), BatchNorm3d(p), make_activation(act, p),
                      _conv(p, cout, 1, 1, rng, act), BatchNorm3d(cout)]
        self.main = self.add_child("main", Sequential(*layers))
        self.skip = None
        if cin != cout or s != 1:
            self.skip = self.add_child("skip", Sequential(
                Conv3d(cin, cout, 1, s, 0, rng=rng), BatchNorm3d(cout)))
        self.act = self.add_child("act", make_activation(act, cout))

    def output_shape(self, shape):
        out = self.main.output_shape(shape)
        skip = self.skip.output_shape(shape) if self.skip else shape
        if out != skip:
            raise ShapeError(f"residual paths disagree: {out} vs {skip}")
        return out

    def __call__(self, x: Var) -> Var:
        skip = self.skip(x) if self.skip else x
        return self.act(add(self.main(x), skip))


class PreActBlock(Module):
    """Pre-activation bottleneck: ``x + main(act(bn(x)))`` with no output activation."""

    def __init__(self, spec: BlockSpec, rng: Rng):
        super().__init__()
        spec.validate()
        self.spec = spec
        act, cin, p, s = spec.activation, spec.in_channels, spec.planes, spec.stride
        cout = spec.out_channels
        self.pre = self.add_child("pre", Sequential(BatchNorm3d(cin), make_activation(act, cin)))
        self.main = self.add_child("main", Sequential(
            _conv(cin, p, 1, 1, rng, act),
            BatchNorm3d(p), make_activation(act, p), _conv(p, p, 3, s, rng, act),
            BatchNorm3d(p), make_activation(act, p), _conv(p, cout, 1, 1, rng, act)))
        self.skip = None
        if cin != cout or s != 1:
            self.skip = self.add_child("skip", Conv3d(cin, cout, 1, s, 0, rng=rng))

    def output_shape(self, shape):
        return self.main.output_shape(shape)

    def __call__(self, x: Var) -> Var:
        h = self.pre(x)
        skip = self.skip(h) if self.skip else x
        return add(self.main(h), skip)


class DenseLayer(Module):
    """``concat(x, conv3(act(bn(conv1(act(bn(x)))))))``, growing channels by ``planes``."""

    def __init__(self, spec: BlockSpec, rng: Rng):
        super().__init__()
        spec.validate()
        self.spec = spec
        act, cin, k = spec.activation, spec.in_channels, spec.planes
        inner = 4 * k
        self.main = self.add_child("main", Sequential(
            BatchNorm3d(cin), make_activation(act, cin), _conv(cin, inner, 1, 1, rng, act),
            BatchNorm3d(inner), make_activation(act, inner), _conv(inner, k, 3, 1, rng, act)))

    def output_shape(self, shape):
        out = self.main.output_shape(shape)
        return (shape[0], shape[1] + out[1], *shape[2:])

    def __call__(self, x: Var) -> Var:
        return concat_channels(x, self.main(x))


class DenseTransition(Module):
    """BN, activation, 1x1x1 conv to ``cout``, then 2x average pooling."""

    def __init__(self, cin: int, cout: int, activation: str, rng: Rng):
        super().__init__()
        self.body = self.add_child("body", Sequential(
            BatchNorm3d(cin), make_activation(activation, cin),
            Conv3d(cin, cout, 1, 1, 0, rng=rng, slope=activation_slope(activation)),
            Pool3d("avg", 2, 2)))

    def output_shape(self, shape):
        return self.body.output_shape(shape)

    def __call__(self, x: Var) -> Var:
        return self.body(x)


def build_block(spec: BlockSpec, rng: Rng) -> Module:
    spec.validate()
    if spec.genre in ("basic", "bottleneck", "wide"):
        return ResidualBlock(spec, rng)
    if spec.genre == "preact":
        return PreActBlock(spec, rng)
    return DenseLayer(spec, rng)


def residual_block(x: Var, spec: BlockSpec, rng: Rng | None = None) -> Var:
    """Build a freshly initialized block for ``spec`` and apply it to ``x``."""
    return build_block(spec, rng or Rng(0))(x)
