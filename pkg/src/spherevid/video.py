"""Clip construction, augmentation, dataset splitting and synthetic videos.

Videos are ``T x 3 x H x W`` float32 arrays in ``[0, 1]``. The training
augmentation chain runs in this order: temporal sampling, horizontal flip,
square corner/center crop at a drawn scale, bilinear resize, per-channel
mean subtraction. Every random draw for a clip comes from its own stream
keyed by ``(seed, epoch, clip_id)``, so results do not depend on processing
order or thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import sten
from .errors import ConfigError, InputError
from .tensor import Rng

POSITIONS = ("TL", "TR", "BL", "BR", "C")
PAPER_SCALES = (2 ** -0.25, 2 ** -0.5, 2 ** -0.75, 0.5)
AUGMENT_STREAM = 0xA06

# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------


@dataclass
class Video:
    frames: np.ndarray
    label: int
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[1] != 3 or min(self.frames.shape) < 1:
            raise InputError(f"video frames must be T x 3 x H x W with T,H,W >= 1, got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class AugmentPolicy:
    clip_len: int = 16
    flip_prob: float = 0.5
    positions: tuple[str, ...] = POSITIONS
    scales: tuple[float, ...] = PAPER_SCALES
    out_size: int = 112
    channel_means: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.clip_len < 1 or self.out_size < 1:
            raise ConfigError("clip_len and out_size must be positive")
        if not self.scales or any(not 0 < s <= 1 for s in self.scales):
            raise ConfigError(f"scales must lie in (0, 1], got {self.scales}")
        if not self.positions or any(p not in POSITIONS for p in self.positions):
            raise ConfigError(f"crop positions must come from {POSITIONS}")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip_prob must lie in [0, 1]")
        if len(self.channel_means) != 3:
            raise ConfigError("three channel means required")


@dataclass
class DatasetSplit:
    train: list
    val: list
    ratio: float
    seed: int


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def clip_indices(num_frames: int, clip_len: int, rng: Rng | None = None) -> np.ndarray:
    """Frame indices for one clip.

    Short videos loop from frame 0 (index ``i mod T``). Longer videos give a
    contiguous window: uniformly placed when ``rng`` is given, centered
    otherwise.
    """
    if num_frames < 1:
        raise InputError("cannot sample a clip from an empty video")
    if num_frames <= clip_len:
        return np.arange(clip_len) % num_frames
    span = num_frames - clip_len
    start = rng.integers(span + 1) if rng is not None else span // 2
    return np.arange(start, start + clip_len)


def sample_clip(video: Video | np.ndarray, clip_len: int = 16, rng: Rng | None = None) -> np.ndarray:
    frames = video.frames if isinstance(video, Video) else np.asarray(video)
    if frames.shape[0] < 1:
        raise InputError("cannot sample a clip from an empty video")
    return frames[clip_indices(frames.shape[0], clip_len, rng)]


def crop_box(height: int, width: int, position: str, scale: float) -> tuple[int, int, int]:
    """``(top, left, side)`` of the square crop; side is ``round(scale * min(H, W))``."""
    if position not in POSITIONS:
        raise ConfigError(f"unknown crop position {position!r}")
    if not 0 < scale <= 1:
        raise ConfigError(f"crop scale must lie in (0, 1], got {scale}")
    side = max(1, int(math.floor(scale * min(height, width) + 0.5)))
    top = {"TL": 0, "TR": 0, "BL": height - side, "BR": height - side, "C": (height - side) // 2}[position]
    left = {"TL": 0, "BL": 0, "TR": width - side, "BR": width - side, "C": (width - side) // 2}[position]
    return top, left, side


def corner_crop(stack: np.ndarray, position: str | None = None, scale: float | None = None,
                rng: Rng | None = None, policy: AugmentPolicy | None = None) -> np.ndarray:
    """Crop every frame of ``stack`` (``... x H x W``) with one shared box.

    Missing ``position`` / ``scale`` are drawn from ``rng`` using ``policy``.
    """
    policy = policy or AugmentPolicy()
    if position is None:
        position = rng.choice(policy.positions)
    if scale is None:
        scale = rng.choice(policy.scales)
    top, left, side = crop_box(stack.shape[-2], stack.shape[-1], position, scale)
    return stack[..., top:top + side, left:left + side]


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row ``o`` samples source coordinate ``(o + 0.5) * n_in / n_out - 0.5``
    clamped to ``[0, n_in - 1]``, linearly between its two neighbours."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.arange(n_out), lo), 1 - frac)
    np.add.at(mat, (np.arange(n_out), hi), frac)
    return mat.astype(np.float32)


def resize_bilinear(stack: np.ndarray, out_size: int = 112) -> np.ndarray:
    """Resize the last two axes to ``out_size x out_size``, half-pixel centered."""
    h, w = stack.shape[-2:]
    if h < 1 or w < 1 or out_size < 1:
        raise InputError("resize needs positive extents")
    if h == out_size and w == out_size:
        return stack.copy()
    ry = _interp_matrix(h, out_size)
    rx = _interp_matrix(w, out_size)
    return (ry @ (stack.astype(np.float32) @ rx.T)).astype(np.float32)


def hflip(stack: np.ndarray, rng: Rng | None = None, p: float = 0.5) -> np.ndarray:
    """Reverse the width axis of every frame with probability ``p`` (one draw)."""
    if p <= 0:
        return stack
    if p >= 1 or rng.bernoulli(p):
        return stack[..., ::-1].copy()
    return stack


def mean_subtract(stack: np.ndarray, channel_means: Sequence[float]) -> np.ndarray:
    """Subtract one constant per channel; ``stack`` is ``T x 3 x H x W``."""
    if len(channel_means) != 3:
        raise ConfigError("three channel means required")
    means = np.asarray(channel_means, dtype=np.float32).reshape(1, 3, 1, 1)
    return (stack - means).astype(np.float32)


def channel_means(videos: Sequence[Video]) -> tuple[float, float, float]:
    """Per-channel pixel mean over every frame of ``videos``."""
    if not videos:
        raise InputError("no videos to average")
    total = np.zeros(3)
    count = 0
    for v in videos:
        total += v.frames.sum(axis=(0, 2, 3), dtype=np.float64)
        count += v.frames.shape[0] * v.frames.shape[2] * v.frames.shape[3]
    return tuple(float(t / count) for t in total)


def clip_rng(seed: int, epoch: int, clip_id: int) -> Rng:
    return Rng(seed, AUGMENT_STREAM, epoch, clip_id)


def augment_clip(video: Video, policy: AugmentPolicy, rng: Rng | None = None,
                 mode: str = "train") -> np.ndarray:
    """Full chain; returns ``3 x clip_len x out_size x out_size``.

    Train mode draws, in order: window start, flip, crop position, scale.
    Eval mode is deterministic: centered window, center crop at scale 1, no flip.
    """
    if mode == "train":
        if rng is None:
            raise ConfigError("train-mode augmentation needs an rng")
        clip = sample_clip(video, policy.clip_len, rng)
        clip = hflip(clip, rng, policy.flip_prob)
        clip = corner_crop(clip, rng=rng, policy=policy)
    elif mode == "eval":
        clip = sample_clip(video, policy.clip_len, None)
        clip = corner_crop(clip, "C", 1.0)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    clip = resize_bilinear(clip, policy.out_size)
    clip = mean_subtract(clip, policy.channel_means)
    return np.ascontiguousarray(clip.transpose(1, 0, 2, 3))


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def split_dataset(ids: Sequence, ratio: float = 0.6, seed: int = 0,
                  train_count: int | None = None, val_count: int | None = None,
                  labels: Sequence[int] | None = None) -> DatasetSplit:
    """Seeded shuffled split.

    Train size is ``round(ratio * n)`` unless explicit counts are given, in
    which case they must add up to ``n``. Passing ``labels`` stratifies: each
    class is split separately at ``ratio`` (explicit counts are not allowed
    together with stratification).
    """
    ids = list(ids)
    n = len(ids)
    if n == 0:
        raise InputError("cannot split an empty id set")
    if n < 2:
        raise InputError("need at least two ids to split")
    if not 0 < ratio < 1:
        raise ConfigError("ratio must lie in (0, 1)")
    if (train_count is None) != (val_count is None):
        raise ConfigError("give both train_count and val_count or neither")
    rng = Rng(seed, 0x5917)
    if labels is not None:
        if train_count is not None:
            raise ConfigError("explicit counts cannot be combined with stratification")
        labels = list(labels)
        train, val = [], []
        for cls in sorted(set(labels)):
            members = [i for i, lab in zip(ids, labels) if lab == cls]
            perm = rng.derive(int(cls)).permutation(len(members))
            k = _round_half_up(ratio * len(members))
            train += [members[j] for j in perm[:k]]
            val += [members[j] for j in perm[k:]]
        return DatasetSplit(train, val, ratio, seed)
    if train_count is not None:
        if train_count < 0 or val_count < 0 or train_count + val_count != n:
            raise ConfigError(f"counts {train_count}+{val_count} do not cover {n} ids")
        k = train_count
    else:
        k = _round_half_up(ratio * n)
    perm = rng.permutation(n)
    return DatasetSplit([ids[j] for j in perm[:k]], [ids[j] for j in perm[k:]], ratio, seed)


# ---------------------------------------------------------------------------
# synthetic identities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassPattern:
    """Appearance and motion of one synthetic identity."""

    orientation: float
    frequency: float
    drift: float
    blob_angle: float
    blob_speed: float
    hue: float


def default_patterns(num_classes: int) -> list[ClassPattern]:
    out = []
    for c in range(num_classes):
        frac = c / num_classes
        out.append(ClassPattern(
            orientation=math.pi * frac,
            frequency=2.0 + (c % 3),
            drift=(0.06 + 0.03 * (c % 2)) * (1 if c % 2 == 0 else -1),
            blob_angle=2 * math.pi * frac,
            blob_speed=0.02 + 0.01 * (c % 4),
            hue=2 * math.pi * frac,
        ))
    return out


@dataclass
class SyntheticSpec:
    num_classes: int = 5
    videos_per_class: int = 64
    frames_per_video: int = 20
    height: int = 48
    width: int = 48
    noise_std: float = 0.05
    patterns: list[ClassPattern] | None = None
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("synthetic data needs at least 2 classes")
        if min(self.videos_per_class, self.frames_per_video, self.height, self.width) < 1:
            raise ConfigError("synthetic extents must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.patterns is None:
            self.patterns = default_patterns(self.num_classes)
        if len(self.patterns) != self.num_classes:
            raise ConfigError("one pattern per class required")
        if len(set(self.patterns)) != len(self.patterns):
            raise ConfigError("class patterns must be distinct")
        if not self.class_names:
            self.class_names = [f"class_{c:03d}" for c in range(self.num_classes)]


def render_video(pattern: ClassPattern, spec: SyntheticSpec, rng: Rng) -> np.ndarray:
    """Oriented drifting grating tinted by class hue plus a moving Gaussian blob."""
    T, H, W = spec.frames_per_video, spec.height, spec.width
    yy, xx = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")
    phase0 = 2 * math.pi * rng.random()
    jitter = rng.uniform((2,), -0.15, 0.15)
    brightness = 0.85 + 0.3 * rng.random()
    tint = 0.5 + 0.5 * np.cos(pattern.hue + np.array([0, 2 * math.pi / 3, 4 * math.pi / 3]))
    direction = np.cos(pattern.orientation) * xx + np.sin(pattern.orientation) * yy
    cx0, cy0 = 0.5 + jitter[0], 0.5 + jitter[1]
    vx, vy = math.cos(pattern.blob_angle) * pattern.blob_speed, math.sin(pattern.blob_angle) * pattern.blob_speed
    frames = np.empty((T, 3, H, W))
    for t in range(T):
        grating = np.sin(2 * math.pi * pattern.frequency * direction + phase0 + 2 * math.pi * pattern.drift * t)
        # blob bounces inside the unit square
        cx = 1 - abs(1 - (cx0 + vx * t) % 2)
        cy = 1 - abs(1 - (cy0 + vy * t) % 2)
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * 0.08 ** 2))
        base = 0.5 + 0.22 * grating
        for ch in range(3):
            frames[t, ch] = brightness * (base * (0.6 + 0.4 * tint[ch])) + 0.35 * blob * tint[2 - ch]
    if spec.noise_std > 0:
        frames += rng.normal(frames.shape, 0.0, spec.noise_std)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec, rng: Rng) -> list[Video]:
    """Render ``videos_per_class`` clips per identity; video ``v`` of class
    ``c`` draws from sub-stream ``(c, v)``."""
    videos = []
    for c, pattern in enumerate(spec.patterns):
        for v in range(spec.videos_per_class):
            frames = render_video(pattern, spec, rng.derive(c, v))
            videos.append(Video(frames, c, f"{spec.class_names[c]}/v{v:04d}"))
    return videos


# ---------------------------------------------------------------------------
# on-disk layout: root/<class_name>/<video_id>.vten
# ---------------------------------------------------------------------------

def save_dataset(videos: Sequence[Video], root: str | Path, class_names: Sequence[str]) -> None:
    root = Path(root)
    for v in videos:
        cls = class_names[v.label]
        vid = v.source_id.split("/")[-1] or f"v{id(v)}"
        (root / cls).mkdir(parents=True, exist_ok=True)
        sten.write(root / cls / f"{vid}.vten", v.frames)


def load_dataset(root: str | Path) -> tuple[list[Video], list[str]]:
    """Read every ``.vten`` under ``root``; labels follow sorted class directory names."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    videos = []
    for label, cls in enumerate(class_names):
        for f in sorted((root / cls).glob("*.vten")):
            videos.append(Video(sten.read(f), label, f"{cls}/{f.stem}"))
    if not videos:
        raise InputError(f"no .vten videos under {root}")
    return videos, class_names
