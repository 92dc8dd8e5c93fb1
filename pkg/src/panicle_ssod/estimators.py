"""scikit-learn style estimators over the detector and the co-training engine.

``X`` is a stack of RGB images, shape ``(n, H, W, 3)``, either floats in
[0, 1] or uint8. ``y`` is a sequence with one ``(k, 4)`` array of
``[x_min, y_min, x_max, y_max]`` boxes per image. For
:class:`TeacherStudentDetector` an entry of ``None`` marks an unlabeled image,
in the spirit of scikit-learn's ``-1`` convention for semi-supervised
classifiers.
"""

from __future__ import annotations

from dataclasses import fields
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import data as D
from . import trainer as T
from .config import DESK_SSL
from .detector import DetectorConfig, predict
from .evaluation import map_coco
from .exceptions import InvalidConfig
from .geometry import Box


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Validate and convert an image stack to float32 in [0, 1]."""
    arr = np.asarray(X)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise InvalidConfig(f"expected images shaped (n, H, W, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise InvalidConfig("no images given")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32, copy=False)
        if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
            raise InvalidConfig("float images must be finite and lie in [0, 1]")
    if image_size is not None and arr.shape[1:3] != (image_size, image_size):
        raise InvalidConfig(f"images must be {image_size}x{image_size}, got {arr.shape[2]}x{arr.shape[1]}")
    return arr


def check_boxes(y, n_images: int, allow_missing: bool = False) -> list[np.ndarray | None]:
    """Validate per-image box arrays; ``None`` entries survive only when ``allow_missing``."""
    if y is None or len(y) != n_images:
        raise InvalidConfig(f"need one box array per image ({n_images}), got {None if y is None else len(y)}")
    out: list[np.ndarray | None] = []
    for i, b in enumerate(y):
        if b is None:
            if not allow_missing:
                raise InvalidConfig(f"image {i} has no annotation")
            out.append(None)
            continue
        arr = np.asarray(b, dtype=np.float64).reshape(-1, 4) if len(b) else np.zeros((0, 4))
        if not np.isfinite(arr).all():
            raise InvalidConfig(f"image {i}: non-finite box coordinates")
        out.append(arr)
    return out


def _labeled(X: np.ndarray, boxes: Sequence[np.ndarray | None], prefix: str) -> list[D.LabeledImage]:
    return [
        D.LabeledImage(f"{prefix}{i:05d}", X[i], [Box(*row) for row in (b if b is not None else [])])
        for i, b in enumerate(boxes)
    ]


class PanicleDetector(BaseEstimator):
    """Supervised single-class box detector.

    Trains for ``epochs * steps_per_epoch`` SGD steps on batches drawn with
    replacement; with a validation set the best-validation weights are kept.
    """

    def __init__(
        self,
        image_size: int = 128,
        grid_size: int = 8,
        anchor_sizes=((12.0, 12.0), (20.0, 20.0), (32.0, 32.0)),
        width: int = 16,
        learning_rate: float = DESK_SSL["warmup_lr"],
        epochs: int = DESK_SSL["warmup_epochs"],
        steps_per_epoch: int = DESK_SSL["warmup_steps_per_epoch"],
        batch_size: int = DESK_SSL["warmup_batch"],
        momentum: float = 0.9,
        score_threshold: float = 0.05,
        nms_iou: float = 0.5,
        random_state: int = 0,
    ):
        self.image_size = image_size
        self.grid_size = grid_size
        self.anchor_sizes = anchor_sizes
        self.width = width
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.momentum = momentum
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.random_state = random_state

    def _detector_config(self) -> DetectorConfig:
        return DetectorConfig(
            image_size=self.image_size, grid_size=self.grid_size,
            anchor_sizes=tuple(tuple(a) for a in self.anchor_sizes), width=self.width,
        )

    def _ssl_config(self, **overrides) -> T.SSLConfig:
        kw = dict(
            strategy="baseline",
            warmup_lr=self.learning_rate,
            warmup_epochs=self.epochs,
            warmup_steps_per_epoch=self.steps_per_epoch,
            warmup_batch=self.batch_size,
            labeled_batch=self.batch_size,
            momentum=self.momentum,
            val_score_floor=self.score_threshold,
            eval_nms_iou=self.nms_iou,
        )
        kw.update(overrides)
        return T.SSLConfig(**kw)

    def _validation(self, X_val, y_val):
        if X_val is None:
            return None
        Xv = check_images(X_val, self.image_size)
        return _labeled(Xv, check_boxes(y_val, len(Xv)), "val")

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X, self.image_size)
        images = _labeled(X, check_boxes(y, len(X)), "img")
        history: list[T.EpochMetrics] = []
        self.model_ = T.warmup_train(
            images, self._ssl_config(), self._detector_config(), self.random_state,
            self._validation(X_val, y_val), history=history,
        )
        self.history_ = history
        return self

    def predict(self, X) -> list[np.ndarray]:
        """Per image, an ``(k, 5)`` array of ``[x_min, y_min, x_max, y_max, score]``."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_size)
        dets = predict(self.model_, list(X), self.score_threshold, self.nms_iou)
        return [
            np.array([[*d.box.as_tuple(), d.score] for d in per], dtype=np.float64).reshape(-1, 5)
            for per in dets
        ]

    def score(self, X, y) -> float:
        """COCO-style mAP@[.5:.95] on ``(X, y)``."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_size)
        images = _labeled(X, check_boxes(y, len(X)), "img")
        dets = predict(self.model_, list(X), self.score_threshold, self.nms_iou)
        return map_coco({im.id: d for im, d in zip(images, dets)}, {im.id: im.boxes for im in images}).map


class TeacherStudentDetector(PanicleDetector):
    """Detector trained by warm-up plus teacher-student co-training.

    After ``fit`` the best-validation teacher is ``model_`` (the last teacher
    without a validation set) and the final student is ``student_``.
    ``options`` carries any further :class:`~panicle_ssod.trainer.SSLConfig`
    field by name.
    """

    def __init__(
        self,
        strategy: str = "soft_teacher",
        alpha: float = 1.0,
        ssl_learning_rate: float = DESK_SSL["ssl_lr"],
        ema_decay: float = DESK_SSL["ema_decay"],
        ssl_epochs: int = DESK_SSL["ssl_epochs"],
        labeled_batch_size: int = DESK_SSL["labeled_batch"],
        unlabeled_batch_size: int = DESK_SSL["unlabeled_batch"],
        options: dict | None = None,
        image_size: int = 128,
        grid_size: int = 8,
        anchor_sizes=((12.0, 12.0), (20.0, 20.0), (32.0, 32.0)),
        width: int = 16,
        learning_rate: float = DESK_SSL["warmup_lr"],
        epochs: int = DESK_SSL["warmup_epochs"],
        steps_per_epoch: int = DESK_SSL["warmup_steps_per_epoch"],
        batch_size: int = DESK_SSL["warmup_batch"],
        momentum: float = 0.9,
        score_threshold: float = 0.05,
        nms_iou: float = 0.5,
        random_state: int = 0,
    ):
        super().__init__(
            image_size=image_size, grid_size=grid_size, anchor_sizes=anchor_sizes, width=width,
            learning_rate=learning_rate, epochs=epochs, steps_per_epoch=steps_per_epoch,
            batch_size=batch_size, momentum=momentum, score_threshold=score_threshold,
            nms_iou=nms_iou, random_state=random_state,
        )
        self.strategy = strategy
        self.alpha = alpha
        self.ssl_learning_rate = ssl_learning_rate
        self.ema_decay = ema_decay
        self.ssl_epochs = ssl_epochs
        self.labeled_batch_size = labeled_batch_size
        self.unlabeled_batch_size = unlabeled_batch_size
        self.options = options

    def _ssl_config(self, **overrides) -> T.SSLConfig:
        kw = {k: DESK_SSL[k] for k in ("st_conf_threshold", "burn_in_epochs", "p_lo", "p_hi")}
        kw.update(
            strategy=self.strategy, alpha=self.alpha, ssl_lr=self.ssl_learning_rate,
            ema_decay=self.ema_decay, ssl_epochs=self.ssl_epochs,
            labeled_batch=self.labeled_batch_size, unlabeled_batch=self.unlabeled_batch_size,
        )
        options = dict(self.options or {})
        unknown = set(options) - {f.name for f in fields(T.SSLConfig)}
        if unknown:
            raise InvalidConfig(f"unknown options {sorted(unknown)}")
        kw.update(options)
        kw.update(overrides)
        return super()._ssl_config(**kw)

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X, self.image_size)
        boxes = check_boxes(y, len(X), allow_missing=True)
        images = _labeled(X, boxes, "img")
        labeled = tuple(im.id for im, b in zip(images, boxes) if b is not None)
        unlabeled = tuple(im.id for im, b in zip(images, boxes) if b is None)
        if not labeled:
            raise InvalidConfig("at least one image must be labeled")
        split = D.DatasetSplit(len(labeled) / len(images), self.random_state, labeled, unlabeled)
        state = T.run_training(
            images, split, self._ssl_config(), self._detector_config(),
            self._validation(X_val, y_val), self.random_state,
        )
        self.model_ = T.best_model(state)
        self.student_ = state.student
        self.history_ = state.history
        self.warmup_history_ = state.warmup_history
        self.n_labeled_ = len(labeled)
        self.n_unlabeled_ = len(unlabeled)
        return self
