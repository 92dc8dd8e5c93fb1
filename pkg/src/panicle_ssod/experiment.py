"""Run directories, multi-seed experiments and baseline-vs-SSL comparison.

A run directory holds everything needed to audit or re-evaluate a run::

    config.yaml            full config snapshot (strategy and seed folded in)
    split.json             labeled / unlabeled ids
    warmup_metrics.csv     supervised warm-up curve
    metrics.csv            co-training curve (warm-up curve for baselines)
    checkpoints/best.pt    best-validation teacher (+ .json sidecar)
    checkpoints/student.pt final student (+ .json sidecar)
    pseudo_labels/         per-epoch audit dumps, when enabled
    report.json            EvalReport on the test split plus run identity
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import traceback
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import data as D
from . import trainer as T
from .config import ExperimentConfig
from .detector import Detector, load_checkpoint, predict, save_checkpoint
from .evaluation import EvalReport, map_coco
from .exceptions import InvalidConfig

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"
BEST_CHECKPOINT = Path("checkpoints") / "best.pt"
STUDENT_CHECKPOINT = Path("checkpoints") / "student.pt"


@dataclass
class Datasets:
    train: list[D.LabeledImage]
    val: list[D.LabeledImage]
    test: list[D.LabeledImage]


def load_datasets(config: ExperimentConfig) -> Datasets:
    ds = config.dataset
    if ds.source == "synthetic":
        def gen(count, offset, prefix):
            if count == 0:
                return []
            return D.generate_synthetic_dataset(
                count, ds.image_size, ds.blob_count, ds.blob_size, seed=ds.seed + offset, prefix=prefix,
            )
        return Datasets(gen(ds.train_count, 0, "train"), gen(ds.val_count, 1, "val"), gen(ds.test_count, 2, "test"))
    return read_dataset_dir(ds.path)


def read_dataset_dir(path: str | Path) -> Datasets:
    """Read ``path/{train,val,test}``; a flat dataset directory becomes the train part only."""
    root = Path(path)
    if (root / D.ANNOTATION_FILE).exists():
        return Datasets(D.read_dataset(root), [], [])
    if not (root / "train").is_dir():
        raise InvalidConfig(f"{root} holds neither {D.ANNOTATION_FILE} nor a train/ directory")
    parts = [D.read_dataset(root / p) if (root / p).is_dir() else [] for p in ("train", "val", "test")]
    return Datasets(*parts)


def write_datasets(path: str | Path, datasets: Datasets) -> Path:
    root = Path(path)
    for name in ("train", "val", "test"):
        images = getattr(datasets, name)
        if images:
            D.write_dataset(root / name, images)
    return root


def fingerprint(images: Sequence[D.LabeledImage]) -> str:
    """Content hash of an evaluation set (ids, boxes and pixels)."""
    h = hashlib.sha256()
    for im in sorted(images, key=lambda x: x.id):
        h.update(im.id.encode())
        h.update(np.asarray(im.box_array, np.float64).tobytes())
        h.update(np.round(np.asarray(im.pixels) * 255).astype(np.uint8).tobytes())
    return h.hexdigest()[:16]


def evaluate_model(model: Detector, images: Sequence[D.LabeledImage], config: ExperimentConfig | Mapping) -> EvalReport:
    ev = asdict(config.evaluation) if isinstance(config, ExperimentConfig) else config
    dets = predict(model, [im.pixels for im in images], ev["score_floor"], ev["nms_iou"])
    return map_coco(
        {im.id: d for im, d in zip(images, dets)},
        {im.id: im.boxes for im in images},
        count_cutoff=ev["count_cutoff"],
    )


# ---------------------------------------------------------------------------
# single runs


@dataclass
class RunResult:
    run_dir: Path
    strategy: str
    fraction: float
    seed: int
    report: EvalReport
    state: T.TrainState


def run_config(config: ExperimentConfig, strategy: str, seed: int) -> ExperimentConfig:
    """The config snapshot stored with a run: one strategy, one seed."""
    return replace(config, ssl=replace(config.ssl, strategy=strategy), seeds=(seed,))


def warm_up(config: ExperimentConfig, datasets: Datasets, split: D.DatasetSplit, seed: int):
    """Warm-up shared by every strategy trained on ``split`` with ``seed``."""
    by_id = {im.id: im for im in datasets.train}
    labeled = [by_id[i] for i in split.labeled_ids]
    history: list[T.EpochMetrics] = []
    model = T.warmup_train(labeled, config.ssl, config.detector, seed, datasets.val or None, history=history)
    return model, history


def train_run(
    config: ExperimentConfig,
    datasets: Datasets,
    split: D.DatasetSplit,
    strategy: str,
    seed: int,
    run_dir: str | Path,
    init: tuple[Detector, list[T.EpochMetrics]] | None = None,
) -> RunResult:
    """Train one strategy and write a complete run directory.

    Metrics and checkpoints are flushed as training progresses, so a failing
    run leaves its partial artifacts (and ``error.txt``) behind.
    """
    cfg = run_config(config, strategy, seed)
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.yaml")
    D.write_split(run_dir / "split.json", split)
    chash = cfg.hash()
    meta = {"strategy": strategy, "fraction": split.fraction, "evaluation": asdict(cfg.evaluation)}

    def on_epoch(state: T.TrainState, metrics: T.EpochMetrics) -> None:
        T.write_metrics(run_dir / "metrics.csv", state.history)
        if state.best_epoch == metrics.epoch:
            save_checkpoint(run_dir / BEST_CHECKPOINT, state.teacher, seed=seed, epoch=metrics.epoch,
                            config_hash=chash, extra=meta)

    try:
        if init is None:
            init = warm_up(cfg, datasets, split, seed)
        T.write_metrics(run_dir / "warmup_metrics.csv", init[1])
        state = T.run_training(
            datasets.train, split, cfg.ssl, cfg.detector, datasets.val or None, seed,
            out_dir=run_dir, on_epoch=on_epoch, init=init,
        )
        T.write_metrics(run_dir / "metrics.csv", state.history)
        best = T.best_model(state)
        best_epoch = state.best_epoch if strategy != "baseline" else len(state.warmup_history) - 1
        save_checkpoint(run_dir / BEST_CHECKPOINT, best, seed=seed, epoch=best_epoch, config_hash=chash, extra=meta)
        save_checkpoint(run_dir / STUDENT_CHECKPOINT, state.student, seed=seed, epoch=len(state.history) - 1,
                        config_hash=chash, extra=meta)
        report = evaluate_model(best, datasets.test, cfg)
        record = {
            "strategy": strategy,
            "fraction": split.fraction,
            "seed": seed,
            "config_hash": chash,
            "test_fingerprint": fingerprint(datasets.test),
            "n_labeled": len(split.labeled_ids),
            "n_unlabeled": len(split.unlabeled_ids),
            "best_epoch": best_epoch,
            "report": report.to_json(),
        }
        (run_dir / REPORT_FILE).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    except Exception:
        (run_dir / "error.txt").write_text(traceback.format_exc())
        raise
    return RunResult(run_dir, strategy, split.fraction, seed, report, state)


def run_name(strategy: str, fraction: float, seed: int) -> str:
    return f"{strategy}_f{fraction:g}_s{seed}"


def run_experiment(
    config: ExperimentConfig,
    strategies: Iterable[str] = T.STRATEGIES,
    out_dir: str | Path | None = None,
    datasets: Datasets | None = None,
    progress: Callable[[RunResult], None] | None = None,
) -> list[RunResult]:
    """Every (fraction, seed) pair: one warm-up, then each requested strategy.

    SSL strategies reuse the baseline's warm-up, so for a given fraction and
    seed all strategies start from the same weights. With no unlabeled images
    (fraction 1.0) only the baseline runs.
    """
    strategies = list(strategies)
    unknown = set(strategies) - set(T.STRATEGIES)
    if unknown:
        raise InvalidConfig(f"unknown strategies {sorted(unknown)}")
    out = Path(out_dir or config.output_dir)
    datasets = datasets or load_datasets(config)
    results = []
    for fraction in config.fractions:
        for seed in config.seeds:
            split = D.make_split(datasets.train, fraction, seed)
            init = warm_up(config, datasets, split, seed)
            for strategy in strategies:
                if strategy != "baseline" and not split.unlabeled_ids:
                    continue
                res = train_run(config, datasets, split, strategy, seed, out / run_name(strategy, fraction, seed), init)
                results.append(res)
                if progress:
                    progress(res)
    return results


# ---------------------------------------------------------------------------
# comparison


def read_report(run_dir: str | Path) -> dict:
    path = Path(run_dir) / REPORT_FILE
    if not path.is_file():
        raise InvalidConfig(f"{run_dir} has no {REPORT_FILE}")
    return json.loads(path.read_text())


@dataclass
class Cell:
    strategy: str
    maps: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.maps))

    @property
    def std(self) -> float:
        return float(np.std(self.maps, ddof=1)) if len(self.maps) > 1 else 0.0


def compare_runs(run_dirs: Sequence[str | Path]) -> dict:
    """Group run reports by fraction and strategy.

    Returns a JSON-ready dict with per-seed mAPs, means, sample standard
    deviations and deltas against the baseline of the same fraction (or,
    without a baseline, against the first strategy listed).
    """
    records = [read_report(d) for d in run_dirs]
    if not records:
        raise InvalidConfig("nothing to compare")
    prints = {r["test_fingerprint"] for r in records}
    if len(prints) > 1:
        raise InvalidConfig("runs were evaluated on different test sets")
    table: dict[float, dict[str, Cell]] = {}
    for r in records:
        cells = table.setdefault(float(r["fraction"]), {})
        cells.setdefault(r["strategy"], Cell(r["strategy"], [])).maps.append(float(r["report"]["mAP"]))
    rows = []
    for fraction in sorted(table):
        cells = table[fraction]
        order = sorted(cells, key=lambda s: T.STRATEGIES.index(s) if s in T.STRATEGIES else len(T.STRATEGIES))
        ref = cells.get("baseline", cells[order[0]])
        rows.append({
            "fraction": fraction,
            "reference": ref.strategy,
            "cells": {
                s: {
                    "maps": cells[s].maps,
                    "mean": cells[s].mean,
                    "std": cells[s].std,
                    "delta": cells[s].mean - ref.mean,
                }
                for s in order
            },
        })
    return {"test_fingerprint": prints.pop(), "rows": rows}


def _pct(fraction: float) -> str:
    v = fraction * 100
    return f"{v:.0f}%" if math.isclose(v, round(v)) else f"{v:g}%"


def format_comparison(comparison: Mapping) -> str:
    """Plain-text table, mAP@[.5:.95] x100 with one decimal."""
    lines = []
    for row in comparison["rows"]:
        parts = [f"{_pct(row['fraction']):>5}"]
        for s, cell in row["cells"].items():
            val = f"{cell['mean'] * 100:.1f}"
            if len(cell["maps"]) > 1:
                val += f" ± {cell['std'] * 100:.1f}"
            text = f"{s} {val}"
            if s != row["reference"]:
                text += f"  ({cell['delta'] * 100:+.1f})"
            parts.append(text)
        lines.append("  ".join(parts))
    return "\n".join(lines)


def reevaluate(checkpoint: str | Path, images: Sequence[D.LabeledImage], expected_hash: str | None = None) -> EvalReport:
    """Evaluate a saved checkpoint with the evaluator options stored beside it."""
    model, meta = load_checkpoint(checkpoint)
    if expected_hash is not None and meta.get("config_hash") != expected_hash:
        raise InvalidConfig(
            f"checkpoint config hash {meta.get('config_hash')!r} does not match config {expected_hash!r}"
        )
    ev = meta.get("evaluation") or {"score_floor": 0.05, "nms_iou": 0.5, "count_cutoff": 0.5}
    return evaluate_model(model, images, ev)
