"""COCO-style detection evaluation for a single class.

AP is the mean of the interpolated precision envelope sampled at the 101
recall points ``0.00, 0.01, ..., 1.00``; mAP averages AP over the IoU
thresholds ``0.50, 0.55, ..., 0.95``. Detections are pooled over images
before the precision-recall curve is built.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .exceptions import MismatchedIds
from .geometry import Box, ScoredBox, boxes_to_array, iou_matrix

# k / 100 keeps thresholds bit-equal to the decimal values (0.6, not 0.6000000000000001)
IOU_THRESHOLDS = tuple(k / 100 for k in range(50, 100, 5))
RECALL_POINTS = np.arange(101) / 100


@dataclass
class MatchResult:
    tp: np.ndarray  # bool flag per detection, in descending score order
    scores: np.ndarray
    n_unmatched_gt: int
    matched_gt: np.ndarray = field(repr=False)  # gt index per detection, -1 for FP


def match_detections(detections: Sequence[ScoredBox], gts: Sequence[Box] | np.ndarray, iou_threshold: float) -> MatchResult:
    """Greedy matching in descending score order; each gt is used at most once."""
    scores = np.array([d.score for d in detections], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    det_boxes = boxes_to_array([detections[i] for i in order])
    gt_arr = gts if isinstance(gts, np.ndarray) else boxes_to_array(gts)
    gt_arr = gt_arr.reshape(-1, 4)
    ious = iou_matrix(det_boxes, gt_arr)
    taken = np.zeros(len(gt_arr), dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    matched = np.full(len(order), -1, dtype=np.int64)
    for d in range(len(order)):
        if not len(gt_arr):
            break
        cand = np.where(taken, -1.0, ious[d])
        g = int(np.argmax(cand))
        if cand[g] >= iou_threshold:
            taken[g] = True
            tp[d] = True
            matched[d] = g
    return MatchResult(tp, scores, int((~taken).sum()), matched)


def precision_recall(tp: np.ndarray, scores: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(tp, dtype=bool)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt if n_gt else np.zeros(len(tp))
    precision = ctp / np.maximum(ctp + cfp, 1)
    return recall, precision


def average_precision(tp: np.ndarray, scores: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP.

    With ``n_gt == 0``: 1.0 if there are no detections, else 0.0.
    """
    tp = np.asarray(tp, dtype=bool)
    if n_gt == 0:
        return 1.0 if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    recall, precision = precision_recall(tp, scores, n_gt)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(sampled.mean())


@dataclass
class EvalReport:
    ap_per_threshold: dict[float, float]
    map: float
    pr_curves: dict[float, tuple[list[float], list[float]]] = field(repr=False)
    tp: int
    fp: int
    fn: int
    n_images: int = 0
    n_gt: int = 0

    def to_json(self) -> dict:
        return {
            "mAP": self.map,
            "ap_per_threshold": {f"{t:.2f}": ap for t, ap in self.ap_per_threshold.items()},
            "pr_curves": {f"{t:.2f}": {"recall": r, "precision": p} for t, (r, p) in self.pr_curves.items()},
            "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn},
            "n_images": self.n_images,
            "n_gt": self.n_gt,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, obj: Mapping) -> "EvalReport":
        return cls(
            ap_per_threshold={float(k): v for k, v in obj["ap_per_threshold"].items()},
            map=obj["mAP"],
            pr_curves={float(k): (v["recall"], v["precision"]) for k, v in obj["pr_curves"].items()},
            tp=obj["counts"]["tp"],
            fp=obj["counts"]["fp"],
            fn=obj["counts"]["fn"],
            n_images=obj.get("n_images", 0),
            n_gt=obj.get("n_gt", 0),
        )


def map_coco(
    detections: Mapping[str, Sequence[ScoredBox]],
    gts: Mapping[str, Sequence[Box]],
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
    count_cutoff: float = 0.5,
) -> EvalReport:
    """Pooled per-threshold AP and their mean.

    TP/FP/FN counts use the first threshold and detections scoring at least
    ``count_cutoff``.
    """
    if set(detections) != set(gts):
        raise MismatchedIds("detection and ground-truth image ids differ")
    ids = sorted(gts)
    gt_arrays = {i: boxes_to_array(gts[i]) for i in ids}
    n_gt = sum(len(a) for a in gt_arrays.values())
    aps, curves = {}, {}
    counts = (0, 0, 0)
    for k, thr in enumerate(iou_thresholds):
        flags, scores = [], []
        for i in ids:
            res = match_detections(detections[i], gt_arrays[i], thr)
            flags.append(res.tp)
            scores.append(res.scores)
        tp = np.concatenate(flags) if flags else np.zeros(0, bool)
        sc = np.concatenate(scores) if scores else np.zeros(0)
        aps[thr] = average_precision(tp, sc, n_gt)
        if n_gt and tp.size:
            r, p = precision_recall(tp, sc, n_gt)
            curves[thr] = (r.tolist(), p.tolist())
        else:
            curves[thr] = ([], [])
        if k == 0:
            counted = sc >= count_cutoff
            n_tp = int((tp & counted).sum())
            counts = (n_tp, int((~tp & counted).sum()), n_gt - n_tp)
    ap_values = list(aps.values())
    return EvalReport(aps, float(np.mean(ap_values)), curves, *counts, n_images=len(ids), n_gt=n_gt)
