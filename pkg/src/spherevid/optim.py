"""Adamax and momentum SGD operating in place on :class:`Parameter` lists."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .nn.autograd import Parameter


def _check_grad(p: Parameter) -> np.ndarray:
    g = p.grad
    if g is None:
        return np.zeros_like(p.value)
    if g.shape != p.value.shape:
        raise ConfigError(f"gradient dims {g.shape} differ from parameter {p.name} {p.value.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient for parameter {p.name!r}")
    return g


def step_decay(every: int, factor: float) -> Callable[[int], float]:
    """Multiplier ``factor ** (t // every)``; optional, unused by default."""
    return lambda t: factor ** (t // every)


@dataclass
class AdamaxState:
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    u: list[np.ndarray] = field(default_factory=list)
    lr_schedule: Callable[[int], float] | None = None


class Adamax:
    """Adam with an exponentially weighted infinity norm as denominator.

    ``m <- b1 m + (1 - b1) g``; ``u <- max(b2 u, |g|)``;
    ``p <- p - lr / (1 - b1^t) * m / (u + eps)``.
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 0.002,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, lr_schedule=None):
        if lr <= 0 or eps < 0 or weight_decay < 0 or not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise ConfigError("invalid Adamax hyperparameters")
        self.params = list(params)
        self.state = AdamaxState(lr, betas[0], betas[1], eps, weight_decay,
                                 m=[np.zeros_like(p.value) for p in self.params],
                                 u=[np.zeros_like(p.value) for p in self.params],
                                 lr_schedule=lr_schedule)

    def step(self) -> None:
        s = self.state
        grads = [_check_grad(p) for p in self.params]
        s.t += 1
        lr = s.lr * (s.lr_schedule(s.t - 1) if s.lr_schedule else 1.0)
        step_size = lr / (1 - s.beta1 ** s.t)
        for p, g, m, u in zip(self.params, grads, s.m, s.u):
            if s.weight_decay:
                g = g + s.weight_decay * p.value
            m *= s.beta1
            m += (1 - s.beta1) * g
            np.maximum(s.beta2 * u, np.abs(g), out=u)
            p.value -= (step_size * m / (u + s.eps)).astype(p.value.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def buffers(self) -> dict[str, list[np.ndarray]]:
        return {"m": self.state.m, "u": self.state.u}

    def scalars(self) -> dict:
        s = self.state
        return {"t": s.t, "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2,
                "eps": s.eps, "weight_decay": s.weight_decay}


@dataclass
class SgdState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    t: int = 0
    velocity: list[np.ndarray] = field(default_factory=list)


class SGD:
    """``v <- mu v + g``; ``p <- p - lr v``."""

    def __init__(self, params: Sequence[Parameter], lr: float = 0.1, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        if lr <= 0 or not 0 <= momentum < 1 or weight_decay < 0:
            raise ConfigError("invalid SGD hyperparameters")
        self.params = list(params)
        self.state = SgdState(lr, momentum, weight_decay,
                              velocity=[np.zeros_like(p.value) for p in self.params])

    def step(self) -> None:
        s = self.state
        grads = [_check_grad(p) for p in self.params]
        s.t += 1
        for p, g, v in zip(self.params, grads, s.velocity):
            if s.weight_decay:
                g = g + s.weight_decay * p.value
            v *= s.momentum
            v += g
            p.value -= (s.lr * v).astype(p.value.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def buffers(self) -> dict[str, list[np.ndarray]]:
        return {"velocity": self.state.velocity}

    def scalars(self) -> dict:
        s = self.state
        return {"t": s.t, "lr": s.lr, "momentum": s.momentum, "weight_decay": s.weight_decay}


def adamax_step(params, grads, state: AdamaxState) -> None:
    """Functional form: apply one Adamax update to raw arrays in place."""
    ps = [Parameter(p, f"param{i}") for i, p in enumerate(params)]
    for p, g in zip(ps, grads):
        p.grad = g
    opt = Adamax.__new__(Adamax)
    opt.params = ps
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.u = [np.zeros_like(p) for p in params]
    opt.state = state
    opt.step()


def sgd_step(params, grads, state: SgdState) -> None:
    """Functional form of :class:`SGD` on raw arrays, in place."""
    ps = [Parameter(p, f"param{i}") for i, p in enumerate(params)]
    for p, g in zip(ps, grads):
        p.grad = g
    opt = SGD.__new__(SGD)
    opt.params = ps
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    opt.state = state
    opt.step()
