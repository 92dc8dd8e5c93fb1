"""Minimal single-class, single-scale anchor detector.

The network maps an ``S x S`` RGB image to a ``G x G`` grid with ``A`` anchors
per cell. Anchor ``k`` is ordered row-major over cells, then over anchor
sizes: ``k = (row * G + col) * A + a``. Box deltas use the usual
centre-offset / log-size parameterisation relative to the anchor.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.func import functional_call
from torch.nn import functional as F

from .exceptions import EmptyBatch, InvalidConfig, NonFiniteGradient, ShapeMismatch
from .geometry import Box, ScoredBox, iou_matrix, nms_indices

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
LOGIT_CLAMP = 20.0


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 128
    grid_size: int = 8
    anchor_sizes: tuple[tuple[float, float], ...] = ((12.0, 12.0), (20.0, 20.0), (32.0, 32.0))
    width: int = 16
    max_channels: int | None = None  # default 4 * width
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    prior_prob: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "anchor_sizes", tuple(tuple(float(v) for v in s) for s in self.anchor_sizes))
        if self.grid_size < 1 or self.image_size < self.grid_size:
            raise InvalidConfig("need 1 <= grid_size <= image_size")
        stride = self.image_size / self.grid_size
        if stride != int(stride) or int(stride) & (int(stride) - 1):
            raise InvalidConfig("image_size / grid_size must be a power of two")
        if not self.anchor_sizes or any(w <= 0 or h <= 0 for w, h in self.anchor_sizes):
            raise InvalidConfig("anchor sizes must be positive")
        if not 0.0 <= self.neg_iou <= self.pos_iou <= 1.0:
            raise InvalidConfig("need 0 <= neg_iou <= pos_iou <= 1")
        if self.width < 1:
            raise InvalidConfig("width must be positive")

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_sizes)

    @property
    def n_stages(self) -> int:
        return int(round(math.log2(self.image_size // self.grid_size)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anchor_sizes"] = [list(s) for s in self.anchor_sizes]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DetectorConfig":
        d = dict(d)
        if "anchor_sizes" in d:
            d["anchor_sizes"] = tuple(tuple(s) for s in d["anchor_sizes"])
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# anchors


@dataclass(frozen=True)
class AnchorGrid:
    grid_size: int
    anchor_sizes: tuple[tuple[float, float], ...]
    image_size: int
    boxes: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.boxes)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.boxes, dtype=dtype)


def build_anchors(grid_size: int, anchor_sizes, image_size: int) -> AnchorGrid:
    if grid_size < 1:
        raise InvalidConfig("grid_size must be >= 1")
    sizes = tuple(tuple(float(v) for v in s) for s in anchor_sizes)
    if not sizes or any(w <= 0 or h <= 0 for w, h in sizes):
        raise InvalidConfig("anchor sizes must be positive")
    cell = image_size / grid_size
    rows = []
    for j in range(grid_size):
        cy = (j + 0.5) * cell
        for i in range(grid_size):
            cx = (i + 0.5) * cell
            for w, h in sizes:
                rows.append((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    boxes = np.clip(np.asarray(rows, dtype=np.float64), 0.0, float(image_size))
    return AnchorGrid(grid_size, sizes, image_size, boxes)


def encode(gt: np.ndarray | torch.Tensor, anchors: np.ndarray | torch.Tensor):
    """Deltas ``(dx, dy, dw, dh)`` taking ``anchors`` to ``gt`` (row-aligned)."""
    lib = torch if isinstance(gt, torch.Tensor) else np
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    acx = anchors[..., 0] + 0.5 * aw
    acy = anchors[..., 1] + 0.5 * ah
    gw = gt[..., 2] - gt[..., 0]
    gh = gt[..., 3] - gt[..., 1]
    gcx = gt[..., 0] + 0.5 * gw
    gcy = gt[..., 1] + 0.5 * gh
    return lib.stack([(gcx - acx) / aw, (gcy - acy) / ah, lib.log(gw / aw), lib.log(gh / ah)], -1)


def apply_deltas(deltas, anchors):
    """Inverse of :func:`encode`; log-size deltas are clamped to avoid overflow."""
    lib = torch if isinstance(deltas, torch.Tensor) else np
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    acx = anchors[..., 0] + 0.5 * aw
    acy = anchors[..., 1] + 0.5 * ah
    limit = math.log(1000.0 / 16)
    cx = acx + deltas[..., 0] * aw
    cy = acy + deltas[..., 1] * ah
    w = aw * lib.exp(lib.clip(deltas[..., 2], -limit, limit))
    h = ah * lib.exp(lib.clip(deltas[..., 3], -limit, limit))
    return lib.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], -1)


# ---------------------------------------------------------------------------
# network


@dataclass
class DetectorOutput:
    score_logits: torch.Tensor  # (B, N)
    box_deltas: torch.Tensor  # (B, N, 4)

    def __getitem__(self, idx) -> "DetectorOutput":
        return DetectorOutput(self.score_logits[idx], self.box_deltas[idx])


def _conv(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
        nn.BatchNorm2d(cout),
        nn.SiLU(),
    )


class Detector(nn.Module):
    """Strided conv backbone with a score head and a box head."""

    def __init__(self, config: DetectorConfig | None = None):
        super().__init__()
        self.config = config or DetectorConfig()
        cfg = self.config
        layers, cin = [], 3
        for k in range(cfg.n_stages):
            cout = min(cfg.width * 2 ** k, cfg.max_channels or cfg.width * 4)
            layers.append(_conv(cin, cout, 2))
            cin = cout
        layers.append(_conv(cin, cin, 1))
        self.backbone = nn.Sequential(*layers)
        self.neck = _conv(cin, cin, 1)
        a = cfg.num_anchors
        self.score_head = nn.Conv2d(cin, a, 1)
        self.box_head = nn.Conv2d(cin, 4 * a, 1)
        nn.init.normal_(self.score_head.weight, std=0.01)
        nn.init.constant_(self.score_head.bias, -math.log((1 - cfg.prior_prob) / cfg.prior_prob))
        nn.init.normal_(self.box_head.weight, std=0.01)
        nn.init.zeros_(self.box_head.bias)

    def forward(self, x: torch.Tensor) -> DetectorOutput:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
            raise ShapeMismatch(f"expected (B, 3, {cfg.image_size}, {cfg.image_size}) input, got {tuple(x.shape)}")
        feat = self.neck(self.backbone(x))
        b, g, a = x.shape[0], cfg.grid_size, cfg.num_anchors
        logits = self.score_head(feat).permute(0, 2, 3, 1).reshape(b, g * g * a)
        deltas = self.box_head(feat).view(b, a, 4, g, g).permute(0, 3, 4, 1, 2).reshape(b, g * g * a, 4)
        return DetectorOutput(logits, deltas)

    @property
    def anchors(self) -> AnchorGrid:
        if not hasattr(self, "_anchors"):
            cfg = self.config
            self._anchors = build_anchors(cfg.grid_size, cfg.anchor_sizes, cfg.image_size)
        return self._anchors


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """HxWx3 array, list of arrays, or BxHxWx3 array -> (B, 3, H, W) tensor."""
    if isinstance(images, torch.Tensor):
        return images.to(dtype)
    if isinstance(images, np.ndarray):
        arr = images[None] if images.ndim == 3 else images
    else:
        arr = np.stack([np.asarray(im) for im in images])
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def forward(model: Detector, images, params: Mapping[str, torch.Tensor] | None = None) -> DetectorOutput:
    """Run ``model`` (optionally with substitute ``params``) on images."""
    x = to_tensor(images, dtype=next(model.parameters()).dtype)
    if params is None:
        return model(x)
    return functional_call(model, dict(params), (x,))


# ---------------------------------------------------------------------------
# targets and losses


@dataclass
class TargetAssignment:
    labels: np.ndarray  # (N,) POSITIVE / NEGATIVE / IGNORE
    matched_boxes: np.ndarray  # (N, 4); rows of non-positive anchors are zero
    matched_index: np.ndarray  # (N,) gt index, -1 where not positive

    @property
    def positive(self) -> np.ndarray:
        return self.labels == POSITIVE


def assign_targets(
    anchors: AnchorGrid | np.ndarray,
    gt_boxes: np.ndarray | Sequence[Box],
    pos_iou: float = 0.5,
    neg_iou: float = 0.4,
    ignore_boxes: np.ndarray | None = None,
) -> TargetAssignment:
    """Max-IoU assignment with an ignore band and a best-anchor rule per gt.

    ``ignore_boxes`` (uncertain pseudo-labels) turn every non-positive anchor
    with IoU >= ``neg_iou`` against them into an ignore anchor.
    """
    if not 0.0 <= neg_iou <= pos_iou <= 1.0:
        raise InvalidConfig("need 0 <= neg_iou <= pos_iou <= 1")
    a = anchors.boxes if isinstance(anchors, AnchorGrid) else np.asarray(anchors, dtype=np.float64)
    gts = gt_boxes if isinstance(gt_boxes, np.ndarray) else np.asarray([b.as_tuple() for b in gt_boxes])
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    n = len(a)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    idx = np.full(n, -1, dtype=np.int64)
    if len(gts):
        ious = iou_matrix(a, gts)  # (N, M)
        best_gt = ious.argmax(1)
        best_iou = ious[np.arange(n), best_gt]
        labels[best_iou >= neg_iou] = IGNORE
        pos = best_iou >= pos_iou
        labels[pos] = POSITIVE
        idx[pos] = best_gt[pos]
        # strongest gts claim their best anchor first; ties resolved by index
        claimed: set[int] = set()
        for g in sorted(range(len(gts)), key=lambda m: (-ious[:, m].max(), m)):
            order = np.argsort(-ious[:, g], kind="stable")
            for k in order:
                if int(k) not in claimed:
                    break
            k = int(k)
            claimed.add(k)
            labels[k] = POSITIVE
            idx[k] = g
    if ignore_boxes is not None and len(ignore_boxes):
        unc = iou_matrix(a, np.asarray(ignore_boxes, dtype=np.float64)).max(1)
        labels[(labels != POSITIVE) & (unc >= neg_iou)] = IGNORE
    matched = np.zeros((n, 4), dtype=np.float64)
    if len(gts):
        matched[idx >= 0] = gts[idx[idx >= 0]]
    return TargetAssignment(labels, matched, idx)


@dataclass
class BatchTargets:
    """Stacked per-image assignments, ready for the batched losses."""

    labels: torch.Tensor  # (B, N) long
    deltas: torch.Tensor  # (B, N, 4) encoded targets (zero where not positive)
    neg_weights: torch.Tensor | None = None  # (B, N) reliability weights for negatives

    @classmethod
    def from_assignments(cls, assignments: Sequence[TargetAssignment], anchors: AnchorGrid, dtype=torch.float32):
        labels = np.stack([t.labels for t in assignments])
        deltas = np.zeros(labels.shape + (4,))
        for b, t in enumerate(assignments):
            pos = t.positive
            if pos.any():
                deltas[b, pos] = encode(t.matched_boxes[pos], anchors.boxes[pos])
        return cls(torch.from_numpy(labels), torch.from_numpy(deltas).to(dtype))

    def __len__(self) -> int:
        return self.labels.shape[0]


def bce_per_anchor(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    target = (labels == POSITIVE).to(logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, target, reduction="none")


def classification_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    neg_weights: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean BCE over counted (positive + negative) anchors, per image.

    Works on ``(N,)`` or ``(B, N)`` logits and returns ``(per_image_mean,
    per_anchor_loss)``. With ``neg_weights`` the mean is weighted: positives
    weigh 1, negatives their reliability weight. An image with no counted
    anchors contributes 0.
    """
    labels = torch.as_tensor(labels)
    per_anchor = bce_per_anchor(logits, labels)
    w = (labels != IGNORE).to(logits.dtype)
    if neg_weights is not None:
        w = torch.where(labels == NEGATIVE, neg_weights.to(logits.dtype), w)
    denom = w.sum(-1)
    total = (w * per_anchor).sum(-1)
    mean = torch.where(denom > 0, total / denom.clamp_min(1e-12), torch.zeros_like(total))
    return mean, per_anchor


def smooth_l1(x: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)


def regression_loss(deltas: torch.Tensor, labels: torch.Tensor, target_deltas: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 summed over the 4 deltas, averaged over positive anchors (per image)."""
    labels = torch.as_tensor(labels)
    pos = (labels == POSITIVE).to(deltas.dtype)
    per_anchor = smooth_l1(deltas - target_deltas).sum(-1)
    n_pos = pos.sum(-1)
    total = (pos * per_anchor).sum(-1)
    return torch.where(n_pos > 0, total / n_pos.clamp_min(1.0), torch.zeros_like(total))


@dataclass
class LossValue:
    total: torch.Tensor
    cls: torch.Tensor
    reg: torch.Tensor


def detection_loss(output: DetectorOutput, targets: BatchTargets) -> LossValue:
    """``(1/N) sum_i [L_cls(i) + L_reg(i)]`` over the images of a batch."""
    if len(targets) == 0:
        raise EmptyBatch("detection loss needs at least one image")
    cls, _ = classification_loss(output.score_logits, targets.labels, targets.neg_weights)
    reg = regression_loss(output.box_deltas, targets.labels, targets.deltas)
    cls_m, reg_m = cls.mean(), reg.mean()
    return LossValue(cls_m + reg_m, cls_m, reg_m)


def assign_batch(model: Detector, boxes_per_image: Sequence[np.ndarray], ignore_per_image=None) -> list[TargetAssignment]:
    cfg = model.config
    ignore_per_image = ignore_per_image or [None] * len(boxes_per_image)
    return [
        assign_targets(model.anchors, b, cfg.pos_iou, cfg.neg_iou, ignore_boxes=ig)
        for b, ig in zip(boxes_per_image, ignore_per_image)
    ]


def supervised_loss(model: Detector, batch, params=None) -> LossValue:
    """Supervised loss on a batch of :class:`~panicle_ssod.data.LabeledImage`."""
    if len(batch) == 0:
        raise EmptyBatch("supervised loss needs at least one labeled image")
    out = forward(model, [im.pixels for im in batch], params)
    assignments = assign_batch(model, [im.box_array for im in batch])
    targets = BatchTargets.from_assignments(assignments, model.anchors, out.score_logits.dtype)
    return detection_loss(out, targets)


# ---------------------------------------------------------------------------
# decoding


def decode(
    output: DetectorOutput,
    anchors: AnchorGrid,
    score_threshold: float = 0.5,
    nms_iou: float = 0.5,
) -> list[ScoredBox]:
    """Scores, clipped boxes, score filter, then NMS, for a single image."""
    logits = output.score_logits.detach().double().reshape(-1)
    deltas = output.box_deltas.detach().double().reshape(-1, 4)
    return decode_arrays(torch.sigmoid(logits).numpy(), deltas.numpy(), anchors, score_threshold, nms_iou)


def decode_arrays(scores: np.ndarray, deltas: np.ndarray, anchors: AnchorGrid, score_threshold: float, nms_iou: float) -> list[ScoredBox]:
    keep = scores >= score_threshold
    if not keep.any():
        return []
    boxes = np.clip(apply_deltas(deltas[keep], anchors.boxes[keep]), 0.0, float(anchors.image_size))
    scores = scores[keep]
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, scores = boxes[valid], scores[valid]
    order = nms_indices(boxes, scores, nms_iou)
    return [ScoredBox(Box(*boxes[i]), float(scores[i])) for i in order]


@torch.no_grad()
def predict(model: Detector, images, score_threshold: float = 0.05, nms_iou: float = 0.5, batch_size: int = 64) -> list[list[ScoredBox]]:
    """Eval-mode detections for a sequence of HxWx3 arrays."""
    was_training = model.training
    model.eval()
    out = []
    try:
        for start in range(0, len(images), batch_size):
            res = forward(model, images[start:start + batch_size])
            for b in range(res.score_logits.shape[0]):
                out.append(decode(res[b], model.anchors, score_threshold, nms_iou))
    finally:
        model.train(was_training)
    return out


# ---------------------------------------------------------------------------
# gradients and checkpoints


def gradient(model: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of ``loss_fn(model)`` for every trainable parameter."""
    params = [p for p in model.parameters() if p.requires_grad]
    loss = loss_fn(model)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    for (name, p), g in zip(((n, p) for n, p in model.named_parameters() if p.requires_grad), grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name}")
        out[name] = g
    return out


def save_checkpoint(
    path: str | Path,
    model: Detector,
    *,
    seed: int = 0,
    epoch: int = 0,
    config_hash: str = "",
    extra: Mapping | None = None,
) -> Path:
    """Write ``<path>`` (torch weights) and ``<path>.json`` (sidecar metadata).

    ``extra`` entries are merged into the sidecar; they cannot shadow the
    standard keys.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    cfg = model.config
    meta = {
        "config_hash": config_hash,
        "seed": seed,
        "epoch": epoch,
        "grid_size": cfg.grid_size,
        "anchor_sizes": [list(s) for s in cfg.anchor_sizes],
        "detector": cfg.to_dict(),
    }
    meta = {**dict(extra or {}), **meta}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[Detector, dict]:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    model = Detector(DetectorConfig.from_dict(meta["detector"]))
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, meta
