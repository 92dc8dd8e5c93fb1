"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criterion 1 runs the full synthetic experiment (about 20 minutes on one CPU
core). Set ``PANICLE_ACCEPTANCE_OUT`` to keep its run directories.

Run on its own with ``pytest tests/test_acceptance.py -v``; the summary
lines are repeated at the end of the pytest output.
"""

import math
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from oracles import batch_loss
from panicle_ssod import data as D
from panicle_ssod import detector as M
from panicle_ssod import experiment as X
from panicle_ssod import trainer as T
from panicle_ssod.cli import main
from panicle_ssod.config import ExperimentConfig
from panicle_ssod.evaluation import IOU_THRESHOLDS, average_precision, map_coco
from panicle_ssod.geometry import Box, ScoredBox, nms
from panicle_ssod.pseudo import DISCARDED, RELIABLE, UNCERTAIN, PseudoLabel, ThresholdState, assign_pseudo_labels
from test_detector import assert_fd_agreement

SSL = ("soft_teacher", "efficient_teacher")


# ---------------------------------------------------------------------------
# 1. trend on the default synthetic experiment


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    out = Path(os.environ.get("PANICLE_ACCEPTANCE_OUT") or tmp_path_factory.mktemp("acceptance"))
    cfg = ExperimentConfig(fractions=(0.05, 0.10, 1.0))
    results = X.run_experiment(cfg, ("baseline", *SSL), out)
    return X.compare_runs([r.run_dir for r in results])


@pytest.mark.slow
def test_trend_reproduction(experiment, criterion):
    rows = {row["fraction"]: row["cells"] for row in experiment["rows"]}
    checks, parts = [], []
    for fraction in (0.05, 0.10):
        base = rows[fraction]["baseline"]["mean"]
        for s in SSL:
            gain = (rows[fraction][s]["mean"] - base) * 100
            checks.append(gain >= 2.0)
            parts.append(f"{s}@{fraction:.0%} {gain:+.1f}")
    full = rows[1.0]["baseline"]["mean"]
    for s in SSL:
        checks.append(full >= rows[0.10][s]["mean"])
    parts.append(f"100% {full * 100:.1f} vs 10% " + "/".join(f"{rows[0.10][s]['mean'] * 100:.1f}" for s in SSL))
    print(X.format_comparison(experiment))
    criterion(1, "trend reproduction", all(checks), ", ".join(parts))


# ---------------------------------------------------------------------------
# 2. total = L_s + alpha * L_u at every logged step


def test_loss_identity_every_step(criterion):
    images = D.generate_synthetic_dataset(40, seed=21, prefix="a")
    split = D.make_split(images, 0.25, 0)
    worst, steps = 0.0, 0
    for strategy, alpha in zip(SSL, (1.7, 0.35)):
        cfg = T.SSLConfig(
            strategy=strategy, alpha=alpha, warmup_lr=0.02, ssl_lr=0.005, ema_decay=0.99,
            warmup_epochs=1, warmup_steps_per_epoch=10, ssl_epochs=5, ssl_steps_per_epoch=10,
            st_conf_threshold=0.3, burn_in_epochs=0, p_lo=10, p_hi=40,
        )
        state = T.run_training(images, split, cfg, seed=0)
        for b in state.step_log:
            ref = b.L_s + alpha * b.L_u
            worst = max(worst, abs(b.total - ref) / max(abs(ref), 1e-300))
        steps += len(state.step_log)
    criterion(2, "total = L_s + alpha*L_u", steps == 100 and worst <= 1e-12,
              f"{steps} steps, worst relative error {worst:.1e}")


# ---------------------------------------------------------------------------
# 3. batched losses against per-image loops


def _random_boxes(rng, k, size=128.0):
    xy = rng.uniform(0, size - 12, size=(k, 2))
    wh = rng.uniform(6, 40, size=(k, 2))
    return np.column_stack([xy, np.minimum(xy + wh, size)])


def test_loss_oracles(criterion):
    rng = np.random.default_rng(33)
    torch.manual_seed(33)
    model = M.Detector().double()
    model.train()
    anchors = model.anchors.boxes
    worst = 0.0
    for _ in range(20):
        pixels = list(rng.random((4, 128, 128, 3)))
        gts = [_random_boxes(rng, int(rng.integers(0, 6))) for _ in range(4)]
        out = M.forward(model, pixels)
        logits, deltas = out.score_logits.detach().numpy(), out.box_deltas.detach().numpy()

        batch = [D.LabeledImage(f"i{j}", p, [Box(*b) for b in g]) for j, (p, g) in enumerate(zip(pixels, gts))]
        with torch.no_grad():
            got = M.supervised_loss(model, batch).total.item()
        ref = batch_loss(logits, deltas, M.assign_batch(model, gts), anchors)
        worst = max(worst, abs(got - ref) / abs(ref))

        labels = [
            [PseudoLabel(Box(*b), float(rng.random()), str(rng.choice([RELIABLE, UNCERTAIN, DISCARDED])))
             for b in _random_boxes(rng, int(rng.integers(0, 6)))]
            for _ in range(4)
        ]
        teacher_logits = torch.from_numpy(rng.normal(0, 2, size=(4, len(anchors))))
        pseudo = T.PseudoBatch(labels, teacher_logits, [])
        reliable = [pseudo.reliable(i) for i in range(4)]
        for strategy in SSL:
            got = T.unsupervised_loss(out, T.unsupervised_targets(model, pseudo, strategy)).total.item()
            if strategy == "soft_teacher":
                assigns = M.assign_batch(model, reliable)
                weights = 1.0 - 1.0 / (1.0 + np.exp(-teacher_logits.numpy()))
            else:
                assigns = M.assign_batch(model, reliable, [pseudo.uncertain(i) for i in range(4)])
                weights = None
            ref = batch_loss(logits, deltas, assigns, anchors, weights)
            worst = max(worst, abs(got - ref) / abs(ref))
    criterion(3, "loss oracle equivalence", worst <= 1e-9, f"20 trials, worst relative error {worst:.1e}")


# ---------------------------------------------------------------------------
# 4. NMS against an O(n^2) oracle


def _pairwise_iou(b):
    x1 = np.maximum(b[:, None, 0], b[None, :, 0])
    y1 = np.maximum(b[:, None, 1], b[None, :, 1])
    x2 = np.minimum(b[:, None, 2], b[None, :, 2])
    y2 = np.minimum(b[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area[:, None] + area[None, :] - inter)


def _oracle_nms(boxes, scores, iou_threshold, score_threshold):
    ious = _pairwise_iou(boxes)
    alive = [i for i in range(len(scores)) if scores[i] >= score_threshold]
    kept = []
    while alive:
        best = max(alive, key=lambda i: (scores[i], -i))
        kept.append(best)
        alive = [i for i in alive if i != best and not ious[i, best] > iou_threshold]
    return kept


def test_nms_brute_force(criterion):
    rng = np.random.default_rng(44)
    mismatches = 0
    for trial in range(1000):
        n = int(rng.integers(0, 201))
        xy = rng.uniform(0, 200, size=(n, 2))
        boxes = np.column_stack([xy, xy + rng.uniform(2, 60, size=(n, 2))])
        scores = rng.random(n)
        if trial % 4 == 0:
            scores = np.round(scores, 1)  # force ties
        iou_thr, score_thr = float(rng.uniform(0, 1)), float(rng.uniform(0, 0.5))
        cands = [ScoredBox(Box(*b), float(s)) for b, s in zip(boxes, scores)]
        expected = [cands[i] for i in _oracle_nms(boxes, scores, iou_thr, score_thr)]
        mismatches += nms(cands, iou_thr, score_thr) != expected
    criterion(4, "NMS brute-force equivalence", mismatches == 0, f"1000 sets, {mismatches} mismatches")


# ---------------------------------------------------------------------------
# 5. mAP fixtures


def test_map_fixtures(criterion):
    gts = {"a": [Box(0, 0, 10, 10), Box(20, 20, 40, 40)], "b": [Box(5, 5, 9, 9)]}
    perfect = map_coco({k: [ScoredBox(b, 1.0) for b in v] for k, v in gts.items()}, gts).map
    single = map_coco({"a": [ScoredBox(Box(0, 0, 10, 6), 0.9)]}, {"a": [Box(0, 0, 10, 10)]})
    per_t = {t: (1.0 if t <= 0.6 else 0.0) for t in IOU_THRESHOLDS}
    ap = average_precision(np.array([True, False]), np.array([0.9, 0.8]), 2)
    ok = perfect == 1.0 and single.ap_per_threshold == per_t and abs(single.map - 0.3) <= 1e-12 \
        and abs(ap - 51 / 101) <= 1e-6
    criterion(5, "mAP fixtures", ok, f"perfect {perfect}, IoU-0.60 {single.map:.6f}, 1TP/1FP {ap:.6f}")


# ---------------------------------------------------------------------------
# 6. gradients against central differences


def test_finite_difference_gradients(criterion):
    errors = {path: max(assert_fd_agreement(path, seed) for seed in (0, 1, 2))
              for path in ("classification", "regression", "reliability")}
    criterion(6, "finite-difference gradients", max(errors.values()) <= 1e-3,
              ", ".join(f"{k} {v:.1e}" for k, v in errors.items()))


# ---------------------------------------------------------------------------
# 7. EMA closed form


def test_ema_closed_form(criterion):
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(200):
        d = float(rng.choice([0.0, 0.5, 0.999, 1.0]))
        k = int(rng.integers(0, 101))
        t0 = {"w": torch.from_numpy(rng.normal(size=(3, 4))), "b": torch.from_numpy(rng.normal(size=5))}
        s = {n: torch.from_numpy(rng.normal(size=tuple(v.shape))) for n, v in t0.items()}
        t = t0
        for _ in range(k):
            t = T.ema_update(t, s, d)
        for n in t0:
            closed = d ** k * t0[n] + (1 - d ** k) * s[n]
            worst = max(worst, (t[n] - closed).abs().max().item())
    criterion(7, "EMA closed form", worst <= 1e-9, f"200 trials, worst abs error {worst:.1e}")


# ---------------------------------------------------------------------------
# 8. split protocol


def test_split_protocol(criterion):
    ids = [f"img{i:03d}" for i in range(364)]
    seeds = np.random.default_rng(88).integers(0, 2**31, size=100)
    bad = []
    for fraction, count in ((0.01, 3), (0.05, 18), (0.10, 36)):
        for seed in seeds:
            sp = D.make_split(ids, fraction, int(seed))
            lab, unl = set(sp.labeled_ids), set(sp.unlabeled_ids)
            if not (len(sp.labeled_ids) == len(lab) == count and len(sp.unlabeled_ids) == len(unl) == 364 - count
                    and not lab & unl and lab | unl == set(ids)):
                bad.append((fraction, int(seed)))
    criterion(8, "split protocol", not bad, f"3/18/36 labeled over 100 seeds, {len(bad)} bad partitions")


# ---------------------------------------------------------------------------
# 9. assigner partition and epoch adaptor


def _nearest_rank(scores, p):
    s = np.sort(scores)
    return s[max(math.ceil(p / 100 * len(s)) - 1, 0)]


def test_assigner_and_adaptor(criterion):
    rng = np.random.default_rng(99)
    partition_ok = ordered_ok = True
    for _ in range(500):
        scores = rng.random(int(rng.integers(0, 60)))
        t1, t2 = np.sort(rng.random(2))
        cands = [ScoredBox(Box(i, 0, i + 1, 1), float(s)) for i, s in enumerate(scores)]
        got = [p.status for p in assign_pseudo_labels(cands, ThresholdState(float(t1), float(t2)))]
        want = [RELIABLE if s >= t2 else UNCERTAIN if s >= t1 else DISCARDED for s in scores]
        partition_ok &= got == want
        lo, hi = np.sort(rng.uniform(0, 100, 2))
        state = T.epoch_adaptor_update(rng.random(int(rng.integers(0, 300))), T.SSLConfig(p_lo=float(lo), p_hi=float(hi)))
        ordered_ok &= 0.0 <= state.tau1 <= state.tau2 <= 1.0

    grid_ok = True
    for grid, (lo, hi) in (
        (np.linspace(0.10, 0.99, 100), (50, 80)),
        (np.linspace(0.10, 1.00, 46), (10, 40)),
        (np.linspace(0.30, 0.90, 200), (25, 75)),
    ):
        state = T.epoch_adaptor_update(grid, T.SSLConfig(p_lo=float(lo), p_hi=float(hi)))
        step = grid[1] - grid[0]
        grid_ok &= abs(state.tau1 - _nearest_rank(grid, lo)) <= step
        grid_ok &= abs(state.tau2 - _nearest_rank(grid, hi)) <= step
    default_grid = T.epoch_adaptor_update(np.linspace(0.10, 0.99, 100), T.SSLConfig())
    grid_ok &= abs(default_grid.tau1 - 0.55) <= 0.009 + 1e-12 and abs(default_grid.tau2 - 0.81) <= 0.009 + 1e-12
    criterion(9, "assigner partition and adaptor", partition_ok and ordered_ok and grid_ok,
              f"partition {partition_ok}, ordering {ordered_ok}, grid oracle {grid_ok}")


# ---------------------------------------------------------------------------
# 10. CLI determinism

DETERMINISM_YAML = """\
dataset:
  train_count: 40
  val_count: 8
  test_count: 8
  image_size: 64
  blob_count: [1, 4]
  blob_size: [8.0, 20.0]
detector:
  image_size: 64
  grid_size: 4
  anchor_sizes: [[12.0, 12.0], [20.0, 20.0]]
ssl:
  warmup_epochs: 3
  warmup_steps_per_epoch: 5
  ssl_epochs: 3
  ssl_steps_per_epoch: 5
  burn_in_epochs: 1
fractions: [0.25]
seeds: [3]
"""


def test_cli_determinism(tmp_path, criterion):
    cfg = tmp_path / "det.yaml"
    cfg.write_text(DETERMINISM_YAML)
    same = []
    for strategy in SSL:
        files = []
        for rep in ("a", "b"):
            out = tmp_path / f"{strategy}_{rep}"
            assert main(["train", "--config", str(cfg), "--strategy", strategy, "--out", str(out)]) == 0
            files.append(((out / "metrics.csv").read_bytes(), (out / "warmup_metrics.csv").read_bytes()))
        same.append(files[0] == files[1])
    criterion(10, "CLI determinism", all(same), ", ".join(f"{s} {'identical' if ok else 'DIFFERENT'}"
                                                          for s, ok in zip(SSL, same)))
