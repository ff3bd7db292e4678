"""Finite-difference verification of every backward pass.

Each check compares analytic gradients with central differences at randomly
probed coordinates and reports the worst relative error per parameter group.
Everything runs in 64-bit check mode. The relative-error denominator is
floored at a small fraction of the group's gradient scale, so coordinates
whose true gradient is essentially zero do not produce spurious failures.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import angular
from .angular import AngularLossConfig, FeatureBatch
from .errors import ConfigError
from .nn import layers as L
from .nn.autograd import Tape, Var
from .tensor import Rng, check_mode

LAYER_NAMES = ("conv3d", "prelu", "batchnorm", "pool", "gap", "linear", "residual")
SCOPES = ("loss", "model") + tuple(f"layer:{n}" for n in LAYER_NAMES)

DEFAULT_PROBES = 32
LOSS_TOL = 1e-4
LAYER_TOL = 1e-5
MODEL_TOL = 1e-4
# denominators never drop below this fraction of the group's largest gradient
FLOOR_FRACTION = 1e-3


@dataclass
class GroupResult:
    name: str
    max_rel_err: float
    probes: int
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err)) and self.max_rel_err <= self.tol

    def line(self) -> str:
        verdict = "ok" if self.passed else "FAIL"
        return f"{self.name:<40s} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e} probes={self.probes} {verdict}"


@dataclass
class GradcheckReport:
    scope: str
    groups: list[GroupResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.groups) and all(g.passed for g in self.groups)

    @property
    def max_rel_err(self) -> float:
        return max((g.max_rel_err for g in self.groups), default=float("nan"))

    def lines(self) -> list[str]:
        return [g.line() for g in self.groups]


def rel_errors(analytic: np.ndarray, numeric: np.ndarray, scale: float) -> np.ndarray:
    floor = max(FLOOR_FRACTION * scale, 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def probe_group(name: str, arr: np.ndarray, analytic: np.ndarray, f: Callable[[], float],
                rng: Rng, probes: int, tol: float, h: float = 1e-6) -> GroupResult:
    """Central differences of ``f`` at random entries of ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    count = min(probes, flat.size)
    picks = rng.permutation(flat.size)[:count]
    a = analytic.reshape(-1)[picks]
    num = np.empty(count)
    for i, k in enumerate(picks):
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        num[i] = (fp - fm) / (2 * h)
    scale = float(np.max(np.abs(analytic))) if analytic.size else 0.0
    err = float(rel_errors(a, num, scale).max())
    return GroupResult(name, err, count, tol)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def segment_batch(m: int, per_segment: int, dim: int, num_classes: int, rng: Rng):
    """Features whose label angle sits inside each of the ``m`` psi segments."""
    W = rng.normal((num_classes, dim))
    n = m * per_segment
    y = rng.integers(num_classes, n)
    x = np.empty((n, dim))
    for i in range(n):
        k = i % m
        # keep away from the cosine clamps at theta = 0 and pi
        frac = 0.15 + 0.7 * rng.random()
        theta = (k + frac) * np.pi / m
        w = W[y[i]] / np.linalg.norm(W[y[i]])
        v = rng.normal((dim,))
        v -= (v @ w) * w
        v /= np.linalg.norm(v)
        x[i] = (0.5 + 2.0 * rng.random()) * (np.cos(theta) * w + np.sin(theta) * v)
    return x, W, y


def check_loss(seed: int = 0, probes: int = DEFAULT_PROBES, ms=(1, 2, 3, 4),
               lambdas=(0.0, 5.0), tol: float = LOSS_TOL) -> GradcheckReport:
    report = GradcheckReport("loss")
    with check_mode():
        for m in ms:
            for lam in lambdas:
                rng = Rng(seed, 0x6C05, m, int(lam))
                x, W, y = segment_batch(m, 3, 16, 5, rng)
                cfg = AngularLossConfig(m, lam)

                def f():
                    return angular.asoftmax_loss(FeatureBatch(x, y), W, cfg)[0]

                _, _, state = angular.asoftmax_loss(FeatureBatch(x, y), W, cfg)
                gx, gW = angular.asoftmax_backward(state)
                tag = f"loss m={m} lambda={lam:g}"
                report.groups.append(probe_group(f"{tag} x", x, gx, f, rng, probes, tol))
                report.groups.append(probe_group(f"{tag} W", W, gW, f, rng, probes, tol))
    return report


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _layer_case(name: str, rng: Rng) -> list[tuple[str, L.Module, tuple[int, ...]]]:
    if name == "conv3d":
        return [("conv3d k3 s1 p1", L.Conv3d(2, 3, 3, 1, 1, bias=True, rng=rng), (2, 2, 4, 5, 5)),
                ("conv3d k(1,3,2) s(1,2,2) p(0,1,0)",
                 L.Conv3d(2, 3, (1, 3, 2), (1, 2, 2), (0, 1, 0), bias=True, rng=rng), (2, 2, 3, 6, 5))]
    if name == "prelu":
        return [("prelu", L.PReLU(3), (2, 3, 2, 3, 3))]
    if name == "batchnorm":
        return [("batchnorm 5-D", L.BatchNorm3d(3), (3, 3, 2, 3, 3)),
                ("batchnorm 2-D", L.BatchNorm3d(4), (6, 4))]
    if name == "pool":
        return [("pool max k3 s2 p1", L.Pool3d("max", 3, 2, 1), (2, 2, 4, 5, 5)),
                ("pool avg k2", L.Pool3d("avg", 2), (2, 2, 4, 4, 4))]
    if name == "gap":
        return [("gap", L.GlobalAvgPool(), (2, 3, 2, 3, 3))]
    if name == "linear":
        return [("linear", L.Linear(6, 4, bias=True, rng=rng), (5, 6))]
    if name == "residual":
        return [(f"residual {spec.genre} s{spec.stride}", L.build_block(spec, rng), (2, spec.in_channels, 2, 4, 4))
                for spec in (L.BlockSpec("basic", 4, 4, 1, "prelu"),
                             L.BlockSpec("basic", 4, 6, 2, "prelu"),
                             L.BlockSpec("bottleneck", 4, 2, 1, "relu"),
                             L.BlockSpec("preact", 4, 2, 1, "prelu"),
                             L.BlockSpec("dense-transition", 4, 2, 1, "prelu"))]
    raise ConfigError(f"unknown layer {name!r}; choose from {', '.join(LAYER_NAMES)}")


def check_module(tag: str, module: L.Module, x: np.ndarray, rng: Rng, probes: int,
                 tol: float) -> list[GroupResult]:
    """Probe input and parameter gradients of ``sum(module(x) * R)``."""
    module.train()
    xvar = Var(x, requires_grad=True)
    out = module(xvar)
    R = rng.normal(out.shape)
    module.zero_grad()
    with Tape() as tape:
        xvar = Var(x, requires_grad=True)
        out = module(xvar)
    grads = tape.backward(out, R)

    def f() -> float:
        return float(np.sum(module(Var(x)).value * R))

    results = [probe_group(f"{tag} input", x, grads[id(xvar)], f, rng, probes, tol)]
    for pname, p in module.named_parameters():
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        results.append(probe_group(f"{tag} {pname}", p.value, g, f, rng, probes, tol))
    return results


def check_layer(name: str, seed: int = 0, probes: int = DEFAULT_PROBES,
                tol: float = LAYER_TOL) -> GradcheckReport:
    report = GradcheckReport(f"layer:{name}")
    with check_mode():
        rng = Rng(seed, 0x1A7E)
        for tag, module, shape in _layer_case(name, rng):
            x = rng.normal(shape)
            report.groups.extend(check_module(tag, module, x, rng, probes, tol))
    return report


# ---------------------------------------------------------------------------
# whole model
# ---------------------------------------------------------------------------

def check_model(seed: int = 0, probes: int = 16, tol: float = MODEL_TOL) -> GradcheckReport:
    """Loss gradient of a tiny model with respect to its input and every parameter group."""
    from .models import Model, preset

    report = GradcheckReport("model")
    with check_mode():
        cfg = preset("desk-resnet10-basic", base_width=4, embedding_dim=8, num_classes=3,
                     stem_kernel=(3, 3, 3), stem_stride=(1, 2, 2), clip_len=4, input_size=16)
        model = Model(cfg, seed, AngularLossConfig(4, 5.0))
        rng = Rng(seed, 0x30DE)
        x = rng.normal((3, 3, 4, 16, 16))
        y = np.array([0, 1, 2])
        model.train()
        model.zero_grad()
        with Tape() as tape:
            xvar = Var(x, requires_grad=True)
            loss = model.loss(xvar, y)
        grads = tape.backward(loss)

        def f() -> float:
            return float(model.loss(Var(x), y).value)

        report.groups.append(probe_group("model input", x, grads[id(xvar)], f, rng, probes, tol))
        for pname, p in model.named_parameters():
            report.groups.append(probe_group(f"model {pname}", p.value, p.grad, f, rng, probes, tol))
    return report


def gradcheck(scope: str, seed: int = 0, probes: int = DEFAULT_PROBES) -> GradcheckReport:
    if scope == "loss":
        return check_loss(seed, probes)
    if scope == "model":
        return check_model(seed, min(probes, 16))
    if scope.startswith("layer:"):
        return check_layer(scope.split(":", 1)[1], seed, probes)
    raise ConfigError(f"unknown gradcheck scope {scope!r}; choose from {', '.join(SCOPES)}")
