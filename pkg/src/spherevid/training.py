"""Training and evaluation loops, checkpoints, metrics and embedding export."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import shutil
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import sten
from .angular import AngleStats, FeatureBatch, asoftmax_loss, cross_entropy_loss
from .config import TrainConfig, parse_config
from .errors import CompatibilityError, FormatError, InputError, NumericError
from .models import Model, build_model
from .nn.autograd import Tape
from .optim import SGD, Adamax, step_decay
from .tensor import Rng
from .video import (AugmentPolicy, Video, augment_clip, channel_means, clip_indices, clip_rng,
                    corner_crop, mean_subtract, resize_bilinear, split_dataset)

log = logging.getLogger(__name__)

SHUFFLE_STREAM = 0x5A1F
METRICS_HEADER = ("epoch", "train_loss", "val_loss", "val_loss_avg", "val_acc",
                  "intra_mean", "inter_min", "wall_time_s")


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_loss_avg: float
    val_acc: float
    intra_mean: float
    inter_min: float
    wall_time_s: float

    def cells(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, f.name))) for f in fields(self)[1:]]


def running_average(values: Sequence[float], window: int) -> list[float]:
    """Trailing mean over the last ``window`` entries (fewer at the start)."""
    return [float(np.mean(values[max(0, i + 1 - window):i + 1])) for i in range(len(values))]


def write_metrics(path: Path, rows: Sequence[MetricsRow]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow(r.cells())
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_metrics(path: Path) -> list[MetricsRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [MetricsRow(int(r["epoch"]), *(float(r[k]) for k in METRICS_HEADER[1:]))
                for r in reader]


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    stats: AngleStats
    embeddings: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray


def _eval_windows(video: Video, policy: AugmentPolicy, count: int) -> list[np.ndarray]:
    """``count`` evenly spaced deterministic clips; ``count == 1`` is the centered clip."""
    if count == 1:
        return [augment_clip(video, policy, mode="eval")]
    T, L = video.num_frames, policy.clip_len
    starts = np.linspace(0, max(T - L, 0), count).round().astype(int)
    out = []
    for s in starts:
        idx = (s + np.arange(L)) % T if T >= L else clip_indices(T, L)
        clip = corner_crop(video.frames[idx], "C", 1.0)
        clip = mean_subtract(resize_bilinear(clip, policy.out_size), policy.channel_means)
        out.append(np.ascontiguousarray(clip.transpose(1, 0, 2, 3)))
    return out


class Trainer:
    """Owns the model, optimizer, split and metric history of one run."""

    def __init__(self, cfg: TrainConfig, videos: Sequence[Video], class_names: Sequence[str]):
        if len(videos) < 2:
            raise InputError("training needs at least two videos")
        self.cfg = cfg
        self.videos = list(videos)
        self.class_names = list(class_names)
        ids = list(range(len(self.videos)))
        labels = [v.label for v in self.videos] if cfg.stratified else None
        counts = (cfg.train_count, cfg.val_count) if cfg.train_count else (None, None)
        self.split = split_dataset(ids, cfg.split_ratio, cfg.seed, *counts, labels=labels)
        if not self.split.train or not self.split.val:
            raise InputError("split produced an empty train or validation set")
        means = channel_means([self.videos[i] for i in self.split.train])
        self.policy = AugmentPolicy(clip_len=cfg.clip_len, out_size=cfg.input_size, channel_means=means)
        self.model: Model = build_model(cfg.model_config(len(self.class_names)), cfg.seed, cfg.loss_config())
        params = self.model.parameters()
        if cfg.optimizer == "adamax":
            sched = step_decay(cfg.lr_step_every, cfg.lr_step_factor) if cfg.lr_step_every else None
            self.optimizer = Adamax(params, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.eps,
                                    cfg.weight_decay, lr_schedule=sched)
        else:
            self.optimizer = SGD(params, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
        self.epoch = 0
        self.history: list[MetricsRow] = []
        self._eval_cache: dict[int, list[np.ndarray]] = {}

    # -- loops -------------------------------------------------------------

    def train_epoch(self) -> float:
        cfg, model = self.cfg, self.model
        model.train()
        order = Rng(cfg.seed, SHUFFLE_STREAM, self.epoch).permutation(len(self.split.train))
        ids = [self.split.train[i] for i in order]
        starts = list(range(0, len(ids), cfg.batch_size))
        if len(starts) > 1 and len(ids) - starts[-1] == 1:
            # a lone trailing clip leaves batch norm without statistics; fold it in
            starts.pop()
        bounds = starts[1:] + [len(ids)]
        total, seen = 0.0, 0
        for b, (start, stop) in enumerate(zip(starts, bounds)):
            batch = ids[start:stop]
            clips = np.stack([augment_clip(self.videos[i], self.policy,
                                           clip_rng(cfg.seed, self.epoch, i)) for i in batch])
            labels = np.array([self.videos[i].label for i in batch])
            with Tape() as tape:
                loss = model.loss(clips, labels)
            value = float(loss.value)
            if not np.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {self.epoch + 1}, batch {b}")
            tape.backward(loss)
            self.optimizer.step()
            self.optimizer.zero_grad()
            model.head.step()
            total += value * len(batch)
            seen += len(batch)
        return total / seen

    def _clips_for(self, vid: int) -> list[np.ndarray]:
        if vid not in self._eval_cache:
            self._eval_cache[vid] = _eval_windows(self.videos[vid], self.policy, self.cfg.eval_clips)
        return self._eval_cache[vid]

    def evaluate_ids(self, ids: Sequence[int], batch_size: int = 32) -> EvalResult:
        if not ids:
            raise InputError("cannot evaluate an empty split")
        model = self.model
        model.eval()
        k = self.cfg.eval_clips
        clips = [c for i in ids for c in self._clips_for(i)]
        embs = []
        for s in range(0, len(clips), batch_size):
            embs.append(model.features(np.stack(clips[s:s + batch_size])).value)
        model.train()
        emb_all = np.concatenate(embs).reshape(len(ids), k, -1)
        labels = np.array([self.videos[i].label for i in ids])
        if k == 1:
            preds = model.head.predict(emb_all[:, 0])
        else:
            votes = model.head.predict(emb_all.reshape(len(ids) * k, -1)).reshape(len(ids), k)
            preds = np.array([np.bincount(v, minlength=len(self.class_names)).argmax() for v in votes])
        emb = emb_all.mean(axis=1)
        loss = self._loss_value(emb, labels)
        stats = model.head.stats(emb, labels)
        return EvalResult(loss, float(np.mean(preds == labels)), stats, emb, labels, preds)

    def _loss_value(self, emb: np.ndarray, labels: np.ndarray) -> float:
        head = self.model.head
        if head.kind == "asoftmax":
            return asoftmax_loss(FeatureBatch(emb, labels), head.weight.value, head.current_config)[0]
        return cross_entropy_loss(head.logits(emb), labels)[0]

    def run(self, out_dir: str | Path, epochs: int | None = None) -> list[MetricsRow]:
        """Train until ``epochs`` total epochs; checkpoint and metrics after each."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        target = epochs or self.cfg.epochs
        while self.epoch < target:
            t0 = time.perf_counter()
            train_loss = self.train_epoch()
            self.epoch += 1
            res = self.evaluate_ids(self.split.val)
            if not np.isfinite(res.loss):
                raise NumericError(f"non-finite validation loss at epoch {self.epoch}")
            val_losses = [r.val_loss for r in self.history] + [res.loss]
            avg = running_average(val_losses, self.cfg.metrics_window)[-1]
            wall = time.perf_counter() - t0 if self.cfg.log_wall_time else 0.0
            row = MetricsRow(self.epoch, train_loss, res.loss, avg, res.accuracy,
                             res.stats.intra_mean,
                             res.stats.inter_min if res.stats.inter_min is not None else float("nan"),
                             wall)
            self.history.append(row)
            log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.4f", row.epoch,
                     row.train_loss, row.val_loss, row.val_acc)
            write_metrics(out / "metrics.csv", self.history)
            save_checkpoint(self, out / "checkpoint")
        return self.history


# ---------------------------------------------------------------------------
# checkpoints: directory of STEN blobs plus manifest.json
# ---------------------------------------------------------------------------

def _blob_name(name: str) -> str:
    return name.replace("/", "_") + ".sten"


def save_checkpoint(trainer: Trainer, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    for sub in ("params", "buffers", "optim"):
        (tmp / sub).mkdir(parents=True)
    model, opt = trainer.model, trainer.optimizer
    for name, p in model.named_parameters():
        sten.write(tmp / "params" / _blob_name(name), p.value)
    for name, b in model.named_buffers():
        sten.write(tmp / "buffers" / _blob_name(name), b)
    for key, arrays in opt.buffers().items():
        for i, a in enumerate(arrays):
            sten.write(tmp / "optim" / f"{key}_{i:04d}.sten", a)
    manifest = {
        "format": 1,
        "epoch": trainer.epoch,
        "config_hash": trainer.cfg.config_hash(),
        "config": trainer.cfg.to_text(),
        "rng_state": {"seed": trainer.cfg.seed, "next_epoch": trainer.epoch},
        "optimizer": {"kind": trainer.cfg.optimizer, **opt.scalars()},
        "head_iteration": model.head.iteration,
        "class_names": trainer.class_names,
        "channel_means": list(trainer.policy.channel_means),
        "split": {"train": trainer.split.train, "val": trainer.split.val},
        "history": [r.cells() for r in trainer.history],
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    old = path.with_name(path.name + ".old")
    if path.exists():
        os.replace(path, old)
    os.replace(tmp, path)
    if old.exists():
        shutil.rmtree(old)


def read_manifest(path: str | Path) -> dict:
    f = Path(path) / "manifest.json"
    if not f.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {f}")
    try:
        return json.loads(f.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt manifest: {exc}") from None


def load_checkpoint(path: str | Path, videos: Sequence[Video], class_names: Sequence[str],
                    cfg: TrainConfig | None = None) -> Trainer:
    """Rebuild a trainer exactly as it was when the checkpoint was written."""
    path = Path(path)
    manifest = read_manifest(path)
    saved_cfg = parse_config(manifest["config"])
    if cfg is None:
        cfg = saved_cfg
    elif cfg.config_hash() != manifest["config_hash"]:
        raise CompatibilityError(
            f"config hash {cfg.config_hash()} does not match checkpoint {manifest['config_hash']}")
    if list(class_names) != manifest["class_names"]:
        raise CompatibilityError("dataset classes differ from the checkpoint")
    trainer = Trainer(cfg, videos, class_names)
    model, opt = trainer.model, trainer.optimizer
    for name, p in model.named_parameters():
        p.value[...] = sten.read(path / "params" / _blob_name(name))
    for name, b in model.named_buffers():
        b[...] = sten.read(path / "buffers" / _blob_name(name))
    for key, arrays in opt.buffers().items():
        for i, a in enumerate(arrays):
            a[...] = sten.read(path / "optim" / f"{key}_{i:04d}.sten")
    opt.state.t = manifest["optimizer"]["t"]
    model.head.iteration = manifest["head_iteration"]
    trainer.epoch = manifest["epoch"]
    trainer.history = [MetricsRow(int(c[0]), *map(float, c[1:])) for c in manifest["history"]]
    if [trainer.split.train, trainer.split.val] != [manifest["split"]["train"], manifest["split"]["val"]]:
        raise CompatibilityError("dataset split differs from the checkpoint")
    return trainer


def export_embeddings(res: EvalResult, out_dir: str | Path, ids: Sequence[str]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sten.write(out / "embeddings.sten", res.embeddings.astype(np.float32))
    sten.write(out / "labels.sten", res.labels.astype(np.float32))
    (out / "ids.txt").write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")
    (out / "angle_stats.json").write_text(json.dumps(asdict(res.stats), indent=1), encoding="utf-8")
