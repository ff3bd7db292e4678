"""Command-line entry point: ``spherevid <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .config import load_config, parse_config
from .errors import SpherevidError
from .gradcheck import DEFAULT_PROBES, SCOPES, gradcheck
from .tensor import Rng
from .training import Trainer, export_embeddings, load_checkpoint, read_manifest
from .video import SyntheticSpec, generate_synthetic, load_dataset, save_dataset

log = logging.getLogger("spherevid")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spherevid", description="3D ResNet with angular-margin softmax for video identity")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress per-epoch logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write metrics plus a checkpoint")
    _common(p)
    p.add_argument("--data", help="dataset root (overrides dataset_root)")
    p.add_argument("--epochs", type=int, help="total epochs to reach")
    p.add_argument("--resume", nargs="?", const="", metavar="CHECKPOINT",
                   help="continue from a checkpoint (default: <out>/checkpoint)")

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint directory (default: <out>/checkpoint)")
    p.add_argument("--data", help="dataset root (default: the one recorded at training)")
    p.add_argument("--split", choices=("val", "train", "all"), default="val")

    p = sub.add_parser("gradcheck", help="finite-difference checks in 64-bit mode")
    _common(p)
    p.add_argument("scope", help=f"one of: {', '.join(SCOPES)}")
    p.add_argument("--probes", type=int, default=DEFAULT_PROBES)

    p = sub.add_parser("gen-data", help="render the synthetic identity dataset")
    _common(p)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--videos-per-class", type=int, default=64)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--noise", type=float, default=0.05)

    p = sub.add_parser("extract-embeddings", help="write per-video embeddings and angle statistics")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset root (default: the one recorded at training)")
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    return parser


def _load_trainer(checkpoint: Path, data: str | None):
    cfg = parse_config(read_manifest(checkpoint)["config"])
    root = data or cfg.dataset_root
    if not root:
        raise SpherevidError("no dataset root recorded; pass --data")
    videos, names = load_dataset(root)
    return load_checkpoint(checkpoint, videos, names), videos


def _split_ids(trainer: Trainer, split: str) -> list[int]:
    if split == "all":
        return list(range(len(trainer.videos)))
    return list(getattr(trainer.split, split))


def cmd_train(args) -> int:
    overrides = dict(seed=args.seed, dataset_root=args.data, epochs=args.epochs)
    out = Path(args.out or "run")
    ckpt = None
    if args.resume is not None:
        ckpt = Path(args.resume) if args.resume else out / "checkpoint"
    if ckpt is not None and args.config is None:
        cfg = parse_config(read_manifest(ckpt)["config"], **overrides)
    else:
        cfg = load_config(args.config, **overrides)
    if not cfg.dataset_root:
        raise SpherevidError("no dataset: set dataset_root in the config or pass --data")
    cfg = cfg.replace(dataset_root=str(Path(cfg.dataset_root).resolve()))
    videos, names = load_dataset(cfg.dataset_root)
    if ckpt is not None:
        trainer = load_checkpoint(ckpt, videos, names, cfg)
        log.info("resumed from %s at epoch %d", ckpt, trainer.epoch)
    else:
        trainer = Trainer(cfg, videos, names)
    rows = trainer.run(out, cfg.epochs)
    last = rows[-1]
    print(f"epoch {last.epoch} val_acc {last.val_acc:.4f} val_loss {last.val_loss:.6f} "
          f"intra_mean {last.intra_mean:.6f} inter_min {last.inter_min:.6f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out or "run") / "checkpoint"
    trainer, _ = _load_trainer(ckpt, args.data)
    res = trainer.evaluate_ids(_split_ids(trainer, args.split))
    print(json.dumps({"split": args.split, "accuracy": res.accuracy, "loss": res.loss,
                      "angle_stats": asdict(res.stats)}))
    return EXIT_OK


def cmd_extract(args) -> int:
    trainer, videos = _load_trainer(Path(args.checkpoint), args.data)
    ids = _split_ids(trainer, args.split)
    res = trainer.evaluate_ids(ids)
    out = Path(args.out or "embeddings")
    export_embeddings(res, out, [videos[i].source_id for i in ids])
    print(json.dumps({"out": str(out), "count": len(ids), "angle_stats": asdict(res.stats)}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    report = gradcheck(args.scope, seed, args.probes)
    for line in report.lines():
        print(line)
    print(f"{report.scope}: {'PASS' if report.passed else 'FAIL'} (max rel err {report.max_rel_err:.3e})")
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else 0
    spec = SyntheticSpec(num_classes=args.classes, videos_per_class=args.videos_per_class,
                         frames_per_video=args.frames, height=args.size, width=args.size,
                         noise_std=args.noise)
    videos = generate_synthetic(spec, Rng(seed))
    out = Path(args.out or "data")
    save_dataset(videos, out, spec.class_names)
    print(f"wrote {len(videos)} videos in {spec.num_classes} classes to {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck,
            "gen-data": cmd_gen_data, "extract-embeddings": cmd_extract}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except SpherevidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
