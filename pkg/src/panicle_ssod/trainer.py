"""Teacher-student training engine.

Stages: a supervised warm-up whose weights seed both teacher and student,
then co-training where the EMA teacher pseudo-labels weak views of unlabeled
images and the student learns from labeled images plus strong views.
"""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import data as D
from .detector import (
    BatchTargets,
    Detector,
    DetectorConfig,
    DetectorOutput,
    LossValue,
    assign_batch,
    decode,
    detection_loss,
    predict,
    to_tensor,
)
from .evaluation import map_coco
from .exceptions import EmptyBatch, EmptyDataset, InvalidConfig, NonFiniteGradient, ShapeMismatch
from .geometry import ScoredBox, boxes_to_array
from .pseudo import (
    DISCARDED,
    RELIABLE,
    UNCERTAIN,
    PseudoLabel,
    ThresholdState,
    assign_pseudo_labels,
    dump_pseudo_labels,
    refine_by_jitter,
    reliability_weights,
)

logger = logging.getLogger(__name__)

STRATEGIES = ("baseline", "soft_teacher", "efficient_teacher")
METRIC_COLUMNS = (
    "epoch", "L_total", "L_s", "L_u", "tau1", "tau2",
    "n_pseudo_reliable", "n_pseudo_uncertain", "val_mAP",
)


@dataclass
class SSLConfig:
    strategy: str = "soft_teacher"
    alpha: float = 1.0
    warmup_lr: float = 0.001
    ssl_lr: float = 0.00005
    momentum: float = 0.9
    weight_decay: float = 0.0
    ema_decay: float = 0.999
    warmup_epochs: int = 20
    warmup_steps_per_epoch: int = 50
    ssl_epochs: int = 10
    ssl_steps_per_epoch: int | None = None  # None: one pass over the unlabeled images
    burn_in_epochs: int = 0
    labeled_batch: int = 4
    unlabeled_batch: int = 4
    warmup_batch: int | None = None  # None: same as labeled_batch
    # soft teacher
    st_conf_threshold: float = 0.9
    st_nms_iou: float = 0.5
    n_jitter: int = 10
    jitter_magnitude: float = 0.06
    variance_threshold: float = 0.02
    # efficient teacher
    et_conf_threshold: float = 0.5
    et_nms_iou: float = 0.1
    tau1: float = 0.1
    tau2: float = 0.5  # static thresholds; tau2 defaults to et_conf_threshold
    p_lo: float = 50.0
    p_hi: float = 80.0
    score_floor: float = 0.1
    min_scores: int = 20
    # evaluation during training
    val_score_floor: float = 0.05
    eval_nms_iou: float = 0.5
    # strong view
    brightness: float = 0.15
    contrast: float = 0.25
    cutout_count: tuple[int, int] = (1, 3)
    cutout_size: tuple[int, int] = (6, 16)
    dump_pseudo_labels: bool = False

    def __post_init__(self):
        self.cutout_count = tuple(self.cutout_count)
        self.cutout_size = tuple(self.cutout_size)
        if self.strategy not in STRATEGIES:
            raise InvalidConfig(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.alpha < 0:
            raise InvalidConfig("alpha must be >= 0")
        if self.warmup_lr <= 0 or self.ssl_lr <= 0:
            raise InvalidConfig("learning rates must be positive")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise InvalidConfig("ema_decay must lie in [0, 1]")
        if min(self.warmup_epochs, self.ssl_epochs, self.burn_in_epochs) < 0:
            raise InvalidConfig("epoch counts must be non-negative")
        if self.burn_in_epochs > self.ssl_epochs:
            raise InvalidConfig("burn_in_epochs must not exceed ssl_epochs")
        if self.labeled_batch < 1 or self.unlabeled_batch < 0 or (self.warmup_batch or 1) < 1:
            raise InvalidConfig("batch sizes must be positive")
        if not 0.0 <= self.p_lo <= self.p_hi <= 100.0:
            raise InvalidConfig("need 0 <= p_lo <= p_hi <= 100")
        ThresholdState(self.tau1, self.tau2)
        self.augmentation  # validates ranges

    @property
    def augmentation(self) -> D.AugmentationSpec:
        return D.AugmentationSpec(
            kind="strong",
            brightness=self.brightness,
            contrast=self.contrast,
            cutout_count=self.cutout_count,
            cutout_size=self.cutout_size,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cutout_count"] = list(self.cutout_count)
        d["cutout_size"] = list(self.cutout_size)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SSLConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown ssl config key(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    total: float
    L_s: float
    L_u: float
    alpha: float
    sup_cls: float = 0.0
    sup_reg: float = 0.0
    unsup_cls: float = 0.0
    unsup_reg: float = 0.0
    n_reliable: int = 0
    n_uncertain: int = 0


@dataclass
class EpochMetrics:
    epoch: int
    L_total: float
    L_s: float
    L_u: float
    tau1: float
    tau2: float
    n_pseudo_reliable: int
    n_pseudo_uncertain: int
    val_mAP: float

    def row(self) -> list[str]:
        return [repr(getattr(self, c)) for c in METRIC_COLUMNS]


@dataclass
class TrainState:
    student: Detector
    teacher: Detector
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    thresholds: ThresholdState
    epoch: int = 0
    step: int = 0
    history: list[EpochMetrics] = field(default_factory=list)
    warmup_history: list[EpochMetrics] = field(default_factory=list)
    step_log: list[LossBreakdown] = field(default_factory=list)
    best_val_map: float = -1.0
    best_state: dict | None = None
    best_epoch: int = -1
    epoch_scores: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# pure pieces


def combined_loss(L_s, L_u, alpha: float):
    return L_s + alpha * L_u


def ema_update(teacher: Mapping[str, torch.Tensor], student: Mapping[str, torch.Tensor], decay: float) -> dict[str, torch.Tensor]:
    """Return ``decay * teacher + (1 - decay) * student`` entry by entry.

    Integer entries (BatchNorm batch counters) are copied from the student.
    """
    if not 0.0 <= decay <= 1.0:
        raise InvalidConfig("decay must lie in [0, 1]")
    if set(teacher) != set(student):
        raise ShapeMismatch("teacher and student have different entries")
    out = {}
    for k, t in teacher.items():
        s = student[k]
        if t.shape != s.shape:
            raise ShapeMismatch(f"{k}: {tuple(t.shape)} vs {tuple(s.shape)}")
        if t.is_floating_point():
            out[k] = decay * t + (1.0 - decay) * s
        else:
            out[k] = s.clone()
    return out


@torch.no_grad()
def ema_update_(teacher: torch.nn.Module, student: torch.nn.Module, decay: float) -> None:
    """In-place module version of :func:`ema_update`."""
    t_state, s_state = teacher.state_dict(), student.state_dict()
    for k, t in t_state.items():
        s = s_state[k]
        if t.is_floating_point():
            t.mul_(decay).add_(s, alpha=1.0 - decay)
        else:
            t.copy_(s)


def epoch_adaptor_update(scores: Sequence[float], config: SSLConfig) -> ThresholdState:
    """Re-estimate ``(tau1, tau2)`` as percentiles of this epoch's pseudo-label scores."""
    arr = np.asarray(scores, dtype=np.float64)
    arr = arr[arr >= config.score_floor]
    if arr.size < config.min_scores:
        return ThresholdState(config.tau1, config.tau2)
    lo, hi = np.percentile(arr, [config.p_lo, config.p_hi])
    return ThresholdState(float(lo), float(max(hi, lo)))


def make_optimizer(model: Detector, lr: float, config: SSLConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(model.parameters(), lr=lr, momentum=config.momentum, weight_decay=config.weight_decay)


def _check_finite(model: torch.nn.Module) -> None:
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteGradient(f"non-finite gradient for {name}")


# ---------------------------------------------------------------------------
# pseudo labels for one batch


@dataclass
class PseudoBatch:
    labels: list[list[PseudoLabel]]
    teacher_logits: torch.Tensor  # (B, N)
    scores: list[float]  # every candidate score, for the epoch adaptor

    def reliable(self, i: int) -> np.ndarray:
        return boxes_to_array([p.box for p in self.labels[i] if p.status == RELIABLE])

    def uncertain(self, i: int) -> np.ndarray:
        return boxes_to_array([p.box for p in self.labels[i] if p.status == UNCERTAIN])

    def count(self, status: str) -> int:
        return sum(p.status == status for labels in self.labels for p in labels)


@torch.no_grad()
def pseudo_label_batch(
    teacher: Detector,
    weak_views: Sequence[np.ndarray],
    config: SSLConfig,
    thresholds: ThresholdState,
    rng: np.random.Generator,
) -> PseudoBatch:
    teacher.eval()
    out = teacher(to_tensor(weak_views))
    labels, scores = [], []
    for i in range(len(weak_views)):
        one = out[i]
        if config.strategy == "soft_teacher":
            cands = decode(one, teacher.anchors, config.st_conf_threshold, config.st_nms_iou)
            img_labels = []
            for c in cands:
                refined = refine_by_jitter(
                    one, teacher.anchors, c, config.n_jitter, config.jitter_magnitude,
                    config.variance_threshold, rng,
                )
                if refined is None:
                    img_labels.append(PseudoLabel(c.box, c.score, DISCARDED))
                else:
                    img_labels.append(PseudoLabel(refined, c.score, RELIABLE))
        else:
            # candidates down to the floor so the epoch adaptor sees the whole score distribution
            cands = decode(one, teacher.anchors, config.score_floor, config.et_nms_iou)
            img_labels = assign_pseudo_labels(cands, thresholds)
        scores.extend(c.score for c in cands)
        labels.append(img_labels)
    return PseudoBatch(labels, out.score_logits, scores)


def unsupervised_targets(model: Detector, pseudo: PseudoBatch, strategy: str) -> BatchTargets:
    n = len(pseudo.labels)
    if strategy == "efficient_teacher":
        assignments = assign_batch(model, [pseudo.reliable(i) for i in range(n)],
                                   [pseudo.uncertain(i) for i in range(n)])
    else:
        assignments = assign_batch(model, [pseudo.reliable(i) for i in range(n)])
    targets = BatchTargets.from_assignments(assignments, model.anchors, pseudo.teacher_logits.dtype)
    if strategy == "soft_teacher":
        targets.neg_weights = reliability_weights(pseudo.teacher_logits, targets.labels)
    return targets


def unsupervised_loss(student_output: DetectorOutput, targets: BatchTargets) -> LossValue:
    """``(1/N_u) sum_i [L_cls + L_reg]`` against pseudo-label targets."""
    return detection_loss(student_output, targets)


# ---------------------------------------------------------------------------
# steps


def _labeled_views(batch: Sequence[D.LabeledImage], rng: np.random.Generator):
    pix, boxes = [], []
    for im in batch:
        p, b = D.augment_weak(im.pixels, im.box_array, rng)
        pix.append(p)
        boxes.append(b)
    return pix, boxes


def supervised_step(model: Detector, optimizer, batch: Sequence[D.LabeledImage], rng) -> LossValue:
    if not batch:
        raise EmptyBatch("empty labeled batch")
    model.train()
    pix, boxes = _labeled_views(batch, rng)
    out = model(to_tensor(pix))
    targets = BatchTargets.from_assignments(assign_batch(model, boxes), model.anchors)
    loss = detection_loss(out, targets)
    optimizer.zero_grad(set_to_none=True)
    loss.total.backward()
    _check_finite(model)
    optimizer.step()
    return loss


def train_step(
    state: TrainState,
    labeled_batch: Sequence[D.LabeledImage],
    unlabeled_batch: Sequence[D.UnlabeledImage],
    config: SSLConfig,
    burn_in: bool = False,
    audit: list | None = None,
) -> LossBreakdown:
    """One co-training step; the teacher only moves through the EMA update.

    During ``burn_in`` the unlabeled strong views still pass through the
    student (so BatchNorm statistics see them) but contribute no loss.
    Gradients are checked before the optimizer step; on NonFiniteGradient the
    student's BatchNorm buffers, the rng and the epoch score list are restored
    so the state is exactly as before the call.
    """
    if not labeled_batch:
        raise EmptyBatch("co-training needs labeled images")
    buffers = {k: v.clone() for k, v in state.student.named_buffers()}
    rng_state = copy.deepcopy(state.rng.bit_generator.state)
    n_scores, n_audit = len(state.epoch_scores), len(audit or ())
    try:
        return _train_step(state, labeled_batch, unlabeled_batch, config, burn_in, audit)
    except NonFiniteGradient:
        with torch.no_grad():
            for k, v in state.student.named_buffers():
                v.copy_(buffers[k])
        state.rng.bit_generator.state = rng_state
        del state.epoch_scores[n_scores:]
        if audit is not None:
            del audit[n_audit:]
        state.optimizer.zero_grad(set_to_none=True)
        raise


def _train_step(state, labeled_batch, unlabeled_batch, config, burn_in, audit) -> LossBreakdown:
    rng = state.rng
    student, teacher = state.student, state.teacher
    lab_pix, lab_boxes = _labeled_views(labeled_batch, rng)

    weak, strong = [], []
    spec = config.augmentation
    for im in unlabeled_batch:
        w, _ = D.augment_weak(im.pixels, np.zeros((0, 4)), rng)
        weak.append(w)
        strong.append(D.photometric(w, rng, spec))

    use_unsup = bool(unlabeled_batch) and not burn_in and config.strategy != "baseline"
    pseudo = None
    if use_unsup:
        pseudo = pseudo_label_batch(teacher, weak, config, state.thresholds, rng)
        state.epoch_scores.extend(pseudo.scores)
        if audit is not None:
            for im, labels in zip(unlabeled_batch, pseudo.labels):
                audit.extend((im.id, p) for p in labels)

    student.train()
    out = student(to_tensor(lab_pix + strong))
    n_l = len(lab_pix)
    sup_targets = BatchTargets.from_assignments(assign_batch(student, lab_boxes), student.anchors)
    sup = detection_loss(out[:n_l], sup_targets)
    if use_unsup:
        unsup = unsupervised_loss(out[n_l:], unsupervised_targets(student, pseudo, config.strategy))
    else:
        zero = out.score_logits.sum() * 0.0
        unsup = LossValue(zero, zero, zero)

    total = combined_loss(sup.total.double(), unsup.total.double(), config.alpha)
    if not torch.isfinite(total):
        raise NonFiniteGradient("non-finite loss")
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    _check_finite(student)
    state.optimizer.step()
    ema_update_(teacher, student, config.ema_decay)
    state.step += 1

    breakdown = LossBreakdown(
        total=total.item(),
        L_s=sup.total.double().item(),
        L_u=unsup.total.double().item(),
        alpha=config.alpha,
        sup_cls=sup.cls.item(),
        sup_reg=sup.reg.item(),
        unsup_cls=unsup.cls.item(),
        unsup_reg=unsup.reg.item(),
        n_reliable=pseudo.count(RELIABLE) if pseudo else 0,
        n_uncertain=pseudo.count(UNCERTAIN) if pseudo else 0,
    )
    state.step_log.append(breakdown)
    return breakdown


# ---------------------------------------------------------------------------
# full runs


def evaluate(model: Detector, images: Sequence[D.LabeledImage], score_floor: float = 0.05, nms_iou: float = 0.5):
    dets = predict(model, [im.pixels for im in images], score_floor, nms_iou)
    return map_coco({im.id: d for im, d in zip(images, dets)}, {im.id: im.boxes for im in images})


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)


def warmup_train(
    labeled: Sequence[D.LabeledImage],
    config: SSLConfig,
    detector_config: DetectorConfig | None = None,
    seed: int = 0,
    val: Sequence[D.LabeledImage] | None = None,
    model: Detector | None = None,
    history: list[EpochMetrics] | None = None,
) -> Detector:
    """Supervised training on the labeled subset only.

    Each epoch is ``warmup_steps_per_epoch`` steps over labeled batches drawn
    with replacement. With ``val`` given, the best-validation weights are
    returned; otherwise the final ones.
    """
    if not labeled:
        raise EmptyDataset("warm-up needs labeled images")
    if model is None:
        _seed_everything(seed)
        model = Detector(detector_config)
    if config.warmup_epochs == 0:
        return model
    rng = np.random.default_rng([seed, 1])
    opt = make_optimizer(model, config.warmup_lr, config)
    best, best_map = None, -1.0
    for epoch in range(config.warmup_epochs):
        totals, cls_sum = [], 0.0
        for _ in range(config.warmup_steps_per_epoch):
            idx = rng.integers(0, len(labeled), size=config.warmup_batch or config.labeled_batch)
            loss = supervised_step(model, opt, [labeled[i] for i in idx], rng)
            totals.append(loss.total.item())
        val_map = float("nan")
        if val:
            val_map = evaluate(model, val, config.val_score_floor, config.eval_nms_iou).map
            if val_map > best_map:
                best_map, best = val_map, copy.deepcopy(model.state_dict())
        mean_loss = float(np.mean(totals))
        if history is not None:
            history.append(EpochMetrics(epoch, mean_loss, mean_loss, 0.0, float("nan"), float("nan"), 0, 0, val_map))
        logger.info("warm-up epoch %d loss %.4f val mAP %.4f", epoch, mean_loss, val_map)
    if best is not None:
        model.load_state_dict(best)
    model.eval()
    return model


def init_state(init: Detector, config: SSLConfig, seed: int) -> TrainState:
    student = copy.deepcopy(init)
    teacher = copy.deepcopy(init)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return TrainState(
        student=student,
        teacher=teacher,
        optimizer=make_optimizer(student, config.ssl_lr, config),
        rng=np.random.default_rng([seed, 2]),
        thresholds=ThresholdState(config.tau1, config.tau2),
    )


def run_training(
    dataset: Sequence[D.LabeledImage],
    split: D.DatasetSplit,
    config: SSLConfig,
    detector_config: DetectorConfig | None = None,
    val: Sequence[D.LabeledImage] | None = None,
    seed: int | None = None,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[TrainState, EpochMetrics], None] | None = None,
    init: tuple[Detector, list[EpochMetrics]] | None = None,
) -> TrainState:
    """Warm-up, then (unless ``strategy == "baseline"``) co-training.

    For the baseline, the returned state's teacher and student are both the
    warm-up result and ``history`` holds the warm-up epochs. Otherwise
    ``history`` has one entry per co-training epoch and ``best_state`` is the
    teacher with the highest validation mAP.

    ``init`` is an already trained ``(warm-up model, warm-up history)`` pair;
    passing it skips the warm-up so several strategies can share one.
    """
    if not dataset:
        raise EmptyDataset("empty training set")
    seed = split.seed if seed is None else seed
    by_id = {im.id: im for im in dataset}
    missing = [i for i in split.labeled_ids + split.unlabeled_ids if i not in by_id]
    if missing:
        raise InvalidConfig(f"split references {len(missing)} id(s) absent from the dataset")
    labeled = [by_id[i] for i in split.labeled_ids]
    unlabeled = [D.UnlabeledImage.from_labeled(by_id[i]) for i in split.unlabeled_ids]
    if not labeled:
        raise EmptyDataset("split has no labeled images")

    if init is None:
        warm_hist: list[EpochMetrics] = []
        init_model = warmup_train(labeled, config, detector_config, seed, val, history=warm_hist)
    else:
        init_model, warm_hist = init[0], list(init[1])
    state = init_state(init_model, config, seed)
    state.warmup_history = warm_hist
    if config.strategy == "baseline" or config.ssl_epochs == 0:
        state.history = list(warm_hist)
        state.best_state = copy.deepcopy(init_model.state_dict())
        return state

    n_steps = config.ssl_steps_per_epoch
    if n_steps is None:
        n_steps = max(1, math.ceil(len(unlabeled) / max(config.unlabeled_batch, 1)))
    out_dir = Path(out_dir) if out_dir else None

    for epoch in range(config.ssl_epochs):
        state.epoch = epoch
        burn_in = config.strategy == "efficient_teacher" and epoch < config.burn_in_epochs
        audit: list | None = [] if (config.dump_pseudo_labels and out_dir) else None
        order = state.rng.permutation(len(unlabeled)) if unlabeled else np.zeros(0, int)
        pos = 0
        logs = []
        state.epoch_scores = []
        for _ in range(n_steps):
            idx = state.rng.integers(0, len(labeled), size=config.labeled_batch)
            u_idx = []
            for _ in range(config.unlabeled_batch if unlabeled else 0):
                if pos == len(order):
                    order, pos = state.rng.permutation(len(unlabeled)), 0
                u_idx.append(order[pos])
                pos += 1
            logs.append(train_step(
                state, [labeled[i] for i in idx], [unlabeled[i] for i in u_idx], config, burn_in, audit,
            ))
        if config.strategy == "efficient_teacher" and not burn_in:
            state.thresholds = epoch_adaptor_update(state.epoch_scores, config)
        val_map = float("nan")
        if val:
            val_map = evaluate(state.teacher, val, config.val_score_floor, config.eval_nms_iou).map
            if val_map > state.best_val_map:
                state.best_val_map = val_map
                state.best_state = copy.deepcopy(state.teacher.state_dict())
                state.best_epoch = epoch
        metrics = EpochMetrics(
            epoch=epoch,
            L_total=float(np.mean([b.total for b in logs])),
            L_s=float(np.mean([b.L_s for b in logs])),
            L_u=float(np.mean([b.L_u for b in logs])),
            tau1=state.thresholds.tau1,
            tau2=state.thresholds.tau2,
            n_pseudo_reliable=int(sum(b.n_reliable for b in logs)),
            n_pseudo_uncertain=int(sum(b.n_uncertain for b in logs)),
            val_mAP=val_map,
        )
        state.history.append(metrics)
        if audit is not None:
            dump_pseudo_labels(out_dir / "pseudo_labels" / f"epoch_{epoch:03d}.jsonl", audit)
        if on_epoch is not None:
            on_epoch(state, metrics)
        logger.info("ssl epoch %d L %.4f L_s %.4f L_u %.4f val mAP %.4f", epoch,
                    metrics.L_total, metrics.L_s, metrics.L_u, val_map)
    if state.best_state is None:
        state.best_state = copy.deepcopy(state.teacher.state_dict())
    return state


def best_model(state: TrainState) -> Detector:
    model = copy.deepcopy(state.teacher)
    if state.best_state is not None:
        model.load_state_dict(state.best_state)
    model.eval()
    return model


def metrics_csv(history: Sequence[EpochMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for m in history:
        writer.writerow(m.row())
    return buf.getvalue()


def write_metrics(path: str | Path, history: Sequence[EpochMetrics]) -> None:
    Path(path).write_text(metrics_csv(history))
