"""Angular-margin softmax (A-softmax) head and discriminability diagnostics.

Class weights are unit-normalized and carry no bias, so each logit is
``||x_i|| * cos(theta_j,i)``. The true-class logit instead uses ``psi``, the
monotone extension of ``cos(m * theta)`` over ``[0, pi]``:

    psi(theta) = (-1)^k cos(m theta) - 2k,  theta in [k pi/m, (k+1) pi/m]

``cos(m theta)`` is evaluated as the Chebyshev polynomial ``T_m(cos theta)``
so the derivative ``(-1)^k m U_{m-1}(cos theta)`` stays finite at 0 and pi.
All internal arithmetic is float64; gradients are cast back to the input
dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, DomainError, NumericError, ShapeError
from .nn.autograd import Var, record
from .nn.layers import Linear, Module
from .tensor import Rng, get_dtype

# T_m(c) and dT_m/dc for m = 1..4
_CHEB = {
    1: (lambda c: c, lambda c: np.ones_like(c)),
    2: (lambda c: 2 * c ** 2 - 1, lambda c: 4 * c),
    3: (lambda c: 4 * c ** 3 - 3 * c, lambda c: 12 * c ** 2 - 3),
    4: (lambda c: 8 * c ** 4 - 8 * c ** 2 + 1, lambda c: 32 * c ** 3 - 16 * c),
}


@dataclass(frozen=True)
class LambdaSchedule:
    """``lambda_t = max(floor, initial * decay ** t)`` for iteration ``t``."""

    initial: float = 1000.0
    floor: float = 5.0
    decay: float = 0.99

    def at(self, iteration: int) -> float:
        return max(self.floor, self.initial * self.decay ** iteration)


@dataclass(frozen=True)
class AngularLossConfig:
    m: int = 4
    anneal_lambda: float = 0.0
    schedule: LambdaSchedule | None = None
    eps_angle: float = 1e-7

    def __post_init__(self):
        if self.m not in (1, 2, 3, 4):
            raise ConfigError(f"margin m must be 1, 2, 3 or 4, got {self.m}")
        if self.anneal_lambda < 0:
            raise ConfigError("anneal_lambda must be >= 0")
        s = self.schedule
        if s is not None:
            if not s.initial >= s.floor >= 0 or not 0 < s.decay <= 1:
                raise ConfigError(f"invalid lambda schedule {s}")
            if self.anneal_lambda and self.anneal_lambda < s.floor:
                raise ConfigError("anneal_lambda below the schedule floor")


@dataclass
class FeatureBatch:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ShapeError(f"features must be N x D with N >= 1, got {self.x.shape}")
        if self.y.shape[0] != self.x.shape[0]:
            raise ShapeError(f"{self.x.shape[0]} features but {self.y.shape[0]} labels")

    def check_labels(self, num_classes: int) -> None:
        if np.any(self.y < 0) or np.any(self.y >= num_classes):
            raise DomainError(f"labels must lie in [0, {num_classes})")


@dataclass
class ClassifierWeights:
    """One weight row per class. Rows are normalized functionally at use."""

    W: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W)
        if self.W.ndim != 2:
            raise ShapeError(f"weights must be C x D, got {self.W.shape}")

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]


@dataclass
class AngleStats:
    intra_mean: float
    intra_max: float
    inter_min: float | None
    inter_mean: float | None
    counts: dict[int, int] = field(default_factory=dict)

    @property
    def has_inter(self) -> bool:
        return self.inter_min is not None


def _x(batch) -> np.ndarray:
    return batch.x if isinstance(batch, FeatureBatch) else np.asarray(batch)


def _w(weights) -> np.ndarray:
    return weights.W if isinstance(weights, ClassifierWeights) else np.asarray(weights)


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite value in A-softmax inputs")


def _unit_rows(a: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    a = a.astype(np.float64)
    norms = np.linalg.norm(a, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DegenerateInputError(f"zero-norm {what} at row {int(zero[0])}")
    return a / norms[:, None], norms


def cosines(batch, weights) -> np.ndarray:
    x, W = _x(batch), _w(weights)
    if x.shape[1] != W.shape[1]:
        raise ShapeError(f"feature dim {x.shape[1]} != weight dim {W.shape[1]}")
    _check_finite(x, W)
    u, _ = _unit_rows(x, "feature")
    what, _ = _unit_rows(W, "class weight")
    return np.clip(u @ what.T, -1.0, 1.0)


def angles(batch, weights) -> np.ndarray:
    """``theta[i, j]``, the angle between feature ``i`` and class weight ``j``."""
    return np.arccos(cosines(batch, weights))


def _segment(c: np.ndarray, m: int, eps: float = 0.0) -> np.ndarray:
    """Segment index ``k``; a joint belongs to the segment on its left."""
    theta = np.arccos(np.clip(c, -1.0 + eps, 1.0 - eps))
    k = np.ceil(m * theta / np.pi) - 1
    return np.clip(k, 0, m - 1)


def psi_from_cos(c: np.ndarray, m: int, eps: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Return ``psi`` and ``d psi / d cos(theta)`` evaluated at cosines ``c``."""
    c = np.asarray(c, dtype=np.float64)
    k = _segment(c, m, eps)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    T, dT = _CHEB[m]
    return sign * T(c) - 2 * k, sign * dT(c)


def psi(theta, m: int):
    """Monotone margin function of an angle in ``[0, pi]``."""
    if m not in _CHEB:
        raise ConfigError(f"margin m must be 1, 2, 3 or 4, got {m}")
    t = np.asarray(theta, dtype=np.float64)
    if np.any(t < 0) or np.any(t > np.pi) or np.any(np.isnan(t)):
        raise DomainError("psi is defined on [0, pi]")
    k = np.clip(np.ceil(m * t / np.pi) - 1, 0, m - 1)
    out = np.where(k % 2 == 0, 1.0, -1.0) * np.cos(m * t) - 2 * k
    return float(out) if np.ndim(theta) == 0 else out


@dataclass
class _LossState:
    u: np.ndarray
    r: np.ndarray
    what: np.ndarray
    wnorm: np.ndarray
    c: np.ndarray
    f_y: np.ndarray
    df_y: np.ndarray
    probs: np.ndarray
    y: np.ndarray
    dtype_x: np.dtype
    dtype_w: np.dtype


def asoftmax_loss(batch: FeatureBatch, weights, cfg: AngularLossConfig):
    """Mean A-softmax loss over the batch.

    Returns ``(loss, logits, state)``; ``logits`` carry the margin on the
    label column and ``state`` feeds :func:`asoftmax_backward`.
    """
    x, W = _x(batch), _w(weights)
    y = batch.y
    if x.shape[1] != W.shape[1]:
        raise ShapeError(f"feature dim {x.shape[1]} != weight dim {W.shape[1]}")
    batch.check_labels(W.shape[0])
    _check_finite(x, W)
    u, r = _unit_rows(x, "feature")
    what, wnorm = _unit_rows(W, "class weight")
    c = u @ what.T
    n = np.arange(x.shape[0])
    c_y = c[n, y]
    p, dp = psi_from_cos(c_y, cfg.m, cfg.eps_angle)
    lam = cfg.anneal_lambda
    f_y = (lam * c_y + p) / (1 + lam)
    df_y = (lam + dp) / (1 + lam)
    logits = r[:, None] * c
    logits[n, y] = r * f_y
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    per_sample = lse - shifted[n, y]
    probs = np.exp(shifted - lse[:, None])
    state = _LossState(u, r, what, wnorm, c, f_y, df_y, probs, y, x.dtype, W.dtype)
    return float(per_sample.mean()), logits, state


def asoftmax_backward(state: _LossState, grad_loss: float = 1.0):
    """Gradients of the mean loss with respect to raw features and raw weights."""
    s = state
    N = s.u.shape[0]
    n = np.arange(N)
    g_z = s.probs.copy()
    g_z[n, s.y] -= 1.0
    g_z *= grad_loss / N
    # z_ij = r_i c_ij (j != y_i),  z_iy = r_i f(c_iy)
    g_r = (g_z * s.c).sum(axis=1) + g_z[n, s.y] * (s.f_y - s.c[n, s.y])
    g_c = g_z * s.r[:, None]
    g_c[n, s.y] *= s.df_y
    g_u = g_c @ s.what
    g_what = g_c.T @ s.u
    # x = r u,  u = x / r
    radial = (g_u * s.u).sum(axis=1, keepdims=True)
    grad_x = g_r[:, None] * s.u + (g_u - radial * s.u) / s.r[:, None]
    tangential = (g_what * s.what).sum(axis=1, keepdims=True)
    grad_W = (g_what - tangential * s.what) / s.wnorm[:, None]
    return grad_x.astype(s.dtype_x), grad_W.astype(s.dtype_w)


def cross_entropy_loss(logits: np.ndarray, y: np.ndarray):
    """Stabilized softmax cross-entropy, mean over the batch; returns ``(loss, probs)``."""
    z = np.asarray(logits, dtype=np.float64)
    if np.any(np.isnan(z)):
        raise NumericError("NaN in logits")
    y = np.asarray(y, dtype=np.int64)
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise DomainError(f"labels must lie in [0, {z.shape[1]})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    n = np.arange(z.shape[0])
    return float((lse - shifted[n, y]).mean()), np.exp(shifted - lse[:, None])


def cross_entropy_backward(probs: np.ndarray, y: np.ndarray, grad_loss: float = 1.0) -> np.ndarray:
    g = probs.copy()
    g[np.arange(len(y)), y] -= 1.0
    return g * (grad_loss / len(y))


def angle_stats(batch: FeatureBatch, weights) -> AngleStats:
    """Intra-class angles (feature to own class weight) and inter-class angles
    (between unit class weights)."""
    W = _w(weights)
    batch.check_labels(W.shape[0])
    theta = angles(batch, W)
    intra = theta[np.arange(len(batch.y)), batch.y]
    labels, counts = np.unique(batch.y, return_counts=True)
    inter_min = inter_mean = None
    if W.shape[0] >= 2:
        what, _ = _unit_rows(W, "class weight")
        pair = np.arccos(np.clip(what @ what.T, -1.0, 1.0))
        iu = np.triu_indices(W.shape[0], k=1)
        inter_min, inter_mean = float(pair[iu].min()), float(pair[iu].mean())
    return AngleStats(float(intra.mean()), float(intra.max()), inter_min, inter_mean,
                      {int(k): int(v) for k, v in zip(labels, counts)})


def predict_angular(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Label of the class weight with the smallest angle; ties go to the lowest index."""
    if W.shape[0] == 1:
        return np.zeros(x.shape[0], dtype=np.int64)
    return cosines(x, W).argmax(axis=1)


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

class AngularSoftmaxHead(Module):
    """Bias-free classifier whose training loss is A-softmax.

    When a lambda schedule is configured the blending weight follows it,
    advancing once per :meth:`step`.
    """

    kind = "asoftmax"

    def __init__(self, dim: int, num_classes: int, cfg: AngularLossConfig, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        self.weight = self.add_param(
            "weight", rng.normal((num_classes, dim), 0.0, 1.0 / np.sqrt(dim)).astype(get_dtype()))
        self.cfg = cfg
        self.iteration = 0

    @property
    def current_config(self) -> AngularLossConfig:
        if self.cfg.schedule is None:
            return self.cfg
        return AngularLossConfig(self.cfg.m, self.cfg.schedule.at(self.iteration),
                                 self.cfg.schedule, self.cfg.eps_angle)

    def step(self) -> None:
        self.iteration += 1

    def logits(self, emb: np.ndarray) -> np.ndarray:
        """Margin-free inference logits ``||x|| cos(theta)``."""
        return np.linalg.norm(emb.astype(np.float64), axis=1, keepdims=True) * cosines(emb, self.weight.value)

    def predict(self, emb: np.ndarray) -> np.ndarray:
        return predict_angular(emb, self.weight.value)

    def loss(self, emb: Var, y: np.ndarray) -> Var:
        W = self.weight
        value, _, state = asoftmax_loss(FeatureBatch(emb.value, y), W.value, self.current_config)

        def backward(g):
            gx, gw = asoftmax_backward(state, float(g))
            W.accumulate(gw)
            return (gx,)

        return record("asoftmax", (emb,), np.asarray(value, dtype=np.float64), backward, has_params=True)

    def stats(self, emb: np.ndarray, y: np.ndarray) -> AngleStats:
        return angle_stats(FeatureBatch(emb, y), self.weight.value)


class CrossEntropyHead(Module):
    """Affine classifier with softmax cross-entropy (the baseline head)."""

    kind = "cross_entropy"

    def __init__(self, dim: int, num_classes: int, rng: Rng | None = None):
        super().__init__()
        self.fc = self.add_child("fc", Linear(dim, num_classes, bias=True, rng=rng))
        self.iteration = 0

    def step(self) -> None:
        self.iteration += 1

    def logits(self, emb: np.ndarray) -> np.ndarray:
        return emb @ self.fc.weight.value + self.fc.bias.value

    def predict(self, emb: np.ndarray) -> np.ndarray:
        return self.logits(emb).argmax(axis=1)

    def loss(self, emb: Var, y: np.ndarray) -> Var:
        z = self.fc(emb)
        value, probs = cross_entropy_loss(z.value, y)

        def backward(g):
            return (cross_entropy_backward(probs, y, float(g)).astype(z.value.dtype),)

        return record("cross_entropy", (z,), np.asarray(value, dtype=np.float64), backward)

    def stats(self, emb: np.ndarray, y: np.ndarray) -> AngleStats:
        # angles against the affine weight columns, bias ignored
        return angle_stats(FeatureBatch(emb, y), self.fc.weight.value.T)
