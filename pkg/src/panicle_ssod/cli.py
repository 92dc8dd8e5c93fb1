"""Command-line entry point: ``panicle-ssod <command>``.

Exit status is 0 on success, 2 for configuration or validation errors and 1
for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import data as D
from . import experiment as X
from .config import ExperimentConfig
from .exceptions import EmptyDataset, InvalidConfig
from .geometry import Box
from .trainer import STRATEGIES

log = logging.getLogger("panicle_ssod")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "data", None):
        cfg = replace(cfg, dataset=replace(cfg.dataset, source="directory", path=str(args.data)))
    return cfg


def _summary(name: str, images: Sequence[D.LabeledImage]) -> str:
    hist = Counter(len(im.boxes) for im in images)
    counts = " ".join(f"{k}:{hist[k]}" for k in sorted(hist))
    return f"{name}: {len(images)} images, {sum(hist[k] * k for k in hist)} boxes, boxes/image {{{counts}}}"


def cmd_synth(args) -> int:
    cfg = _config(args)
    ds = cfg.dataset
    changes = {"source": "synthetic", "path": None}
    if args.count is not None:
        changes["train_count"] = args.count
    if args.seed is not None:
        changes["seed"] = args.seed
    cfg = replace(cfg, dataset=replace(ds, **changes))
    datasets = X.load_datasets(cfg)
    out = X.write_datasets(args.out, datasets)
    for name in ("train", "val", "test"):
        if getattr(datasets, name):
            print(_summary(name, getattr(datasets, name)))
    print(f"written to {out}")
    return 0


def _read_images(path: str | Path, part: str = "train") -> list[D.LabeledImage]:
    parts = X.read_dataset_dir(path)
    images = getattr(parts, part) or parts.train  # a flat directory only has a train part
    if not images:
        raise EmptyDataset(f"no images found in {path}")
    return images


def cmd_tile(args) -> int:
    mosaic = D.read_png(args.mosaic)
    boxes = None
    if args.boxes:
        boxes = [Box(*b) for b in json.loads(Path(args.boxes).read_text())]
    tiles = D.tile_orthomosaic(mosaic, args.tile_size, args.overlap, boxes, prefix=args.prefix)
    D.write_dataset(args.out, tiles)
    print(f"{len(tiles)} tiles of {args.tile_size}px written to {args.out}")
    return 0


def cmd_split(args) -> int:
    images = _read_images(args.dataset)
    split = D.make_split(images, args.fraction, args.seed if args.seed is not None else 0)
    D.write_split(args.out, split)
    print(f"{len(split.labeled_ids)} labeled / {len(split.unlabeled_ids)} unlabeled -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.dump_pseudo_labels:
        cfg = cfg.with_ssl(dump_pseudo_labels=True)
    strategy = args.strategy or cfg.ssl.strategy
    datasets = X.load_datasets(cfg)
    if args.split:
        split = D.read_split(args.split)
        seed = args.seed if args.seed is not None else split.seed
    else:
        seed = args.seed if args.seed is not None else cfg.seeds[0]
        fraction = args.fraction if args.fraction is not None else cfg.fractions[0]
        split = D.make_split(datasets.train, fraction, seed)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / X.run_name(strategy, split.fraction, seed)
    res = X.train_run(cfg, datasets, split, strategy, seed, out)
    print(f"{strategy} fraction {split.fraction:g} seed {seed}: test mAP {res.report.map * 100:.1f} -> {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if ckpt.is_dir():
        ckpt = ckpt / X.BEST_CHECKPOINT
    if not ckpt.is_file() or not Path(str(ckpt) + ".json").is_file():
        raise InvalidConfig(f"checkpoint {ckpt} or its .json sidecar is missing")
    expected = ExperimentConfig.load(args.config).hash() if args.config else None
    if args.dataset:
        images = _read_images(args.dataset, "test")
    else:
        # fall back to the test split described by the run's own config snapshot
        snapshot = ckpt.parent.parent / "config.yaml"
        images = X.load_datasets(ExperimentConfig.load(snapshot)).test
        if not images:
            raise EmptyDataset(f"{snapshot} defines no test images")
    report = X.reevaluate(ckpt, images, expected)
    text = report.dumps()
    if args.out:
        Path(args.out).write_text(text)
    print(f"mAP@[.5:.95] {report.map * 100:.1f} on {report.n_images} images")
    return 0


def cmd_compare(args) -> int:
    comparison = X.compare_runs(args.runs)
    print(X.format_comparison(comparison))
    if args.json:
        Path(args.json).write_text(json.dumps(comparison, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="panicle-ssod", description="Semi-supervised panicle detection experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic train/val/test dataset")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--count", type=int, help="number of training images")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("tile", help="cut an orthomosaic PNG into square tiles")
    s.add_argument("mosaic")
    s.add_argument("--tile-size", type=int, default=640)
    s.add_argument("--overlap", type=int, default=0)
    s.add_argument("--boxes", help="JSON list of mosaic-level [x_min, y_min, x_max, y_max]")
    s.add_argument("--prefix", default="tile")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_tile)

    s = sub.add_parser("split", help="choose the labeled subset of a dataset")
    s.add_argument("dataset")
    s.add_argument("--fraction", type=float, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="warm-up plus co-training; writes a run directory")
    s.add_argument("--config")
    s.add_argument("--data", help="dataset directory (overrides the config's dataset source)")
    s.add_argument("--split", help="split file from the split command")
    s.add_argument("--fraction", type=float, help="labeled fraction when no split file is given")
    s.add_argument("--seed", type=int)
    s.add_argument("--strategy", choices=STRATEGIES)
    s.add_argument("--out")
    s.add_argument("--dump-pseudo-labels", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint (or run directory) on a dataset")
    s.add_argument("checkpoint")
    s.add_argument("dataset", nargs="?", help="defaults to the test split of the run's config.yaml")
    s.add_argument("--config", help="refuse checkpoints trained under a different config")
    s.add_argument("--out", help="write the full EvalReport JSON here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", help="tabulate baseline vs SSL test mAP across run directories")
    s.add_argument("runs", nargs="+")
    s.add_argument("--json")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:  # every validation error is a ValueError
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure; artifacts stay on disk
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
