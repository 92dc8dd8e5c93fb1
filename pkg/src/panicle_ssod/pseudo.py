"""Teacher-side pseudo-label generation and quality control."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .detector import NEGATIVE, AnchorGrid, Detector, DetectorOutput, apply_deltas, decode, forward
from .exceptions import InvalidConfig
from .geometry import Box, ScoredBox, boxes_to_array, iou_matrix, jitter_box

RELIABLE, UNCERTAIN, DISCARDED = "reliable", "uncertain", "discarded"


@dataclass(frozen=True)
class PseudoLabel:
    box: Box
    score: float
    status: str

    def to_json(self, image_id: str) -> dict:
        return {"image_id": image_id, "box": list(self.box.as_tuple()), "score": self.score, "status": self.status}


@dataclass(frozen=True)
class ThresholdState:
    tau1: float
    tau2: float

    def __post_init__(self):
        if not 0.0 <= self.tau1 <= self.tau2 <= 1.0:
            raise InvalidConfig(f"need 0 <= tau1 <= tau2 <= 1, got ({self.tau1}, {self.tau2})")


@torch.no_grad()
def generate_pseudo_labels(
    teacher: Detector,
    image: np.ndarray,
    conf_threshold: float = 0.5,
    nms_iou: float = 0.1,
) -> list[ScoredBox]:
    """Eval-mode teacher detections on one (already weak-augmented) view."""
    was_training = teacher.training
    teacher.eval()
    try:
        out = forward(teacher, image)
    finally:
        teacher.train(was_training)
    return decode(out[0], teacher.anchors, conf_threshold, nms_iou)


def assign_pseudo_labels(candidates: Iterable[ScoredBox], thresholds: ThresholdState) -> list[PseudoLabel]:
    """``score >= tau2`` reliable, ``tau1 <= score < tau2`` uncertain, else discarded."""
    out = []
    for c in candidates:
        if c.score >= thresholds.tau2:
            status = RELIABLE
        elif c.score >= thresholds.tau1:
            status = UNCERTAIN
        else:
            status = DISCARDED
        out.append(PseudoLabel(c.box, c.score, status))
    return out


def reliability_weights(teacher_logits: torch.Tensor, labels: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Teacher background probability on negative anchors, 1 elsewhere."""
    labels = torch.as_tensor(labels)
    bg = 1.0 - torch.sigmoid(teacher_logits.detach())
    return torch.where(labels == NEGATIVE, bg, torch.ones_like(bg))


def _best_anchor(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    return iou_matrix(boxes, anchors).argmax(1)


def refine_by_jitter(
    teacher_output: DetectorOutput,
    anchors: AnchorGrid,
    candidate: ScoredBox,
    n_jitter: int,
    magnitude: float,
    variance_threshold: float,
    rng: np.random.Generator,
) -> Box | None:
    """Jitter ``candidate``, re-read the teacher's box head, and judge the spread.

    Every jittered copy is matched to its highest-IoU anchor and replaced by
    the box the teacher regresses at that anchor. The mean per-coordinate
    standard deviation, normalised by the candidate's width/height, must be
    below ``variance_threshold`` for the candidate to be kept; the refined box
    is the mean regressed box. ``teacher_output`` is the teacher's output on
    the image the candidate came from (a single image, unbatched).
    """
    if n_jitter < 1:
        raise InvalidConfig("n_jitter must be >= 1")
    jittered = boxes_to_array([jitter_box(candidate.box, magnitude, rng) for _ in range(n_jitter)])
    k = _best_anchor(anchors.boxes, jittered)
    deltas = teacher_output.box_deltas.detach().double().reshape(-1, 4).numpy()[k]
    regressed = np.clip(apply_deltas(deltas, anchors.boxes[k]), 0.0, float(anchors.image_size))
    b = candidate.box
    scale = np.array([b.width, b.height, b.width, b.height])
    spread = float((regressed.std(axis=0) / scale).mean())
    if not spread < variance_threshold:
        return None
    mean = regressed.mean(axis=0)
    if not (mean[0] < mean[2] and mean[1] < mean[3]):
        return None
    return Box(*mean)


def dump_pseudo_labels(path: str | Path, labels: Sequence[tuple[str, PseudoLabel]]) -> None:
    """One JSON object per line: image_id, box, score, status."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for image_id, pl in labels:
            fh.write(json.dumps(pl.to_json(image_id)) + "\n")
