"""Axis-aligned box arithmetic.

Boxes use corner format ``(x_min, y_min, x_max, y_max)`` in continuous pixel
coordinates; area is ``(x_max - x_min) * (y_max - y_min)`` with no +1 term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .exceptions import DegenerateBox

__all__ = [
    "Box",
    "ScoredBox",
    "iou",
    "iou_matrix",
    "nms",
    "nms_indices",
    "clip_box",
    "jitter_box",
    "boxes_to_array",
]


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise DegenerateBox(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DegenerateBox(f"box {coords} has non-positive area")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def from_array(cls, arr) -> "Box":
        x0, y0, x1, y1 = (float(v) for v in arr)
        return cls(x0, y0, x1, y1)


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")


def boxes_to_array(boxes: Iterable[Box | ScoredBox]) -> np.ndarray:
    """Stack boxes into an ``(N, 4)`` float64 array."""
    rows = [(b.box if isinstance(b, ScoredBox) else b).as_tuple() for b in boxes]
    if not rows:
        return np.zeros((0, 4), dtype=np.float64)
    return np.asarray(rows, dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS on arrays; returns kept indices in descending score order.

    Equal scores keep input order. A box is suppressed only when its IoU with
    a kept box is strictly greater than ``iou_threshold``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    ious = iou_matrix(boxes[order], boxes[order])
    suppressed = np.zeros(order.size, dtype=bool)
    keep = []
    for i in range(order.size):
        if suppressed[i]:
            continue
        keep.append(order[i])
        suppressed[i + 1:] |= ious[i, i + 1:] > iou_threshold
    return np.asarray(keep, dtype=np.int64)


def nms(
    candidates: Sequence[ScoredBox],
    iou_threshold: float,
    score_threshold: float = 0.0,
) -> list[ScoredBox]:
    if not (0.0 <= iou_threshold <= 1.0 and 0.0 <= score_threshold <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    kept = [c for c in candidates if c.score >= score_threshold]
    if not kept:
        return []
    arr = boxes_to_array(kept)
    scores = np.array([c.score for c in kept])
    return [kept[i] for i in nms_indices(arr, scores, iou_threshold)]


def clip_box(b: Box, width: float, height: float) -> Box:
    """Clamp ``b`` to ``[0, width] x [0, height]``.

    Raises DegenerateBox when nothing of the box remains inside the image.
    """
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    x0 = min(max(b.x_min, 0.0), width)
    y0 = min(max(b.y_min, 0.0), height)
    x1 = min(max(b.x_max, 0.0), width)
    y1 = min(max(b.y_max, 0.0), height)
    if not (x0 < x1 and y0 < y1):
        raise DegenerateBox(f"box {b.as_tuple()} lies outside a {width}x{height} image")
    return Box(x0, y0, x1, y1)


def jitter_box(b: Box, magnitude: float, rng: np.random.Generator) -> Box:
    """Perturb each coordinate by ``U(-m, m)`` times the matching box side.

    Draws exactly four uniforms from ``rng`` regardless of the outcome. If the
    noise would invert the box, the coordinates are re-ordered.
    """
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    noise = rng.uniform(-1.0, 1.0, size=4) * magnitude
    w, h = b.width, b.height
    x0 = b.x_min + noise[0] * w
    y0 = b.y_min + noise[1] * h
    x1 = b.x_max + noise[2] * w
    y1 = b.y_max + noise[3] * h
    x0, x1 = min(x0, x1), max(x0, x1)
    y0, y1 = min(y0, y1), max(y0, y1)
    if x0 == x1 or y0 == y1:
        return b
    return Box(x0, y0, x1, y1)
