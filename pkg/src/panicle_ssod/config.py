"""Experiment configuration stored as a nested YAML document.

Every section maps onto a dataclass; unknown keys anywhere raise
:class:`InvalidConfig` so that a misspelt hyperparameter cannot be silently
ignored.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .detector import DetectorConfig, config_hash
from .exceptions import InvalidConfig
from .trainer import SSLConfig

SOURCES = ("synthetic", "directory")

# Co-training settings for the 128 px synthetic benchmark. The package-level
# SSLConfig defaults are the full-scale values; at this scale they barely move
# the tiny detector, so the desk experiment uses its own.
DESK_SSL = dict(
    warmup_lr=0.02,
    warmup_epochs=30,
    warmup_steps_per_epoch=50,
    warmup_batch=8,
    ssl_lr=0.005,
    ema_decay=0.99,
    ssl_epochs=10,
    labeled_batch=4,
    unlabeled_batch=4,
    st_conf_threshold=0.3,
    burn_in_epochs=1,
    p_lo=10.0,
    p_hi=40.0,
)


def _strict(cls, data: Mapping | None, section: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise InvalidConfig(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    return data


@dataclass
class DatasetConfig:
    """Where images come from.

    ``synthetic`` renders train/val/test in memory from ``seed``,
    ``seed + 1`` and ``seed + 2``; ``directory`` reads ``path/{train,val,test}``
    as written by the ``synth`` command (or by ``tile`` plus annotation).
    """

    source: str = "synthetic"
    path: str | None = None
    train_count: int = 364
    val_count: int = 90
    test_count: int = 60
    image_size: int = 128
    blob_count: tuple[int, int] = (1, 8)
    blob_size: tuple[float, float] = (8.0, 28.0)
    seed: int = 0

    def __post_init__(self):
        self.blob_count = tuple(int(v) for v in self.blob_count)
        self.blob_size = tuple(float(v) for v in self.blob_size)
        if self.source not in SOURCES:
            raise InvalidConfig(f"dataset.source must be one of {SOURCES}, got {self.source!r}")
        if self.source != "synthetic" and not self.path:
            raise InvalidConfig(f"dataset.path is required for source {self.source!r}")
        if self.train_count < 1:
            raise InvalidConfig("dataset.train_count must be >= 1")
        if self.val_count < 0 or self.test_count < 0:
            raise InvalidConfig("dataset.val_count and dataset.test_count must be >= 0")


@dataclass
class EvalConfig:
    score_floor: float = 0.05
    nms_iou: float = 0.5
    count_cutoff: float = 0.5

    def __post_init__(self):
        for name in ("score_floor", "nms_iou", "count_cutoff"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidConfig(f"evaluation.{name} must lie in [0, 1]")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    fractions: tuple[float, ...] = (0.01, 0.05, 0.10, 1.0)
    seeds: tuple[int, ...] = (0, 1, 2)
    ssl: SSLConfig = field(default_factory=lambda: SSLConfig(**DESK_SSL))
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs"

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.fractions or any(not 0.0 < f <= 1.0 for f in self.fractions):
            raise InvalidConfig("fractions must be non-empty and each in (0, 1]")
        if not self.seeds:
            raise InvalidConfig("seeds must be non-empty")
        if self.detector.image_size != self.dataset.image_size and self.dataset.source == "synthetic":
            raise InvalidConfig("detector.image_size must equal dataset.image_size")

    # -- serialisation ----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        ds = asdict(self.dataset)
        ds["blob_count"] = list(self.dataset.blob_count)
        ds["blob_size"] = list(self.dataset.blob_size)
        return {
            "dataset": ds,
            "fractions": list(self.fractions),
            "seeds": list(self.seeds),
            "ssl": self.ssl.to_dict(),
            "detector": self.detector.to_dict(),
            "evaluation": asdict(self.evaluation),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, data: Mapping | None) -> "ExperimentConfig":
        data = _strict(cls, data, "top level")
        kw: dict[str, Any] = {}
        try:
            if "dataset" in data:
                kw["dataset"] = DatasetConfig(**_strict(DatasetConfig, data["dataset"], "dataset"))
            if "ssl" in data:
                merged = {**DESK_SSL, **_strict(SSLConfig, data["ssl"], "ssl")}
                kw["ssl"] = SSLConfig(**merged)
            if "detector" in data:
                kw["detector"] = DetectorConfig.from_dict(_strict(DetectorConfig, data["detector"], "detector"))
            if "evaluation" in data:
                kw["evaluation"] = EvalConfig(**_strict(EvalConfig, data["evaluation"], "evaluation"))
            for key in ("fractions", "seeds", "output_dir"):
                if key in data:
                    kw[key] = data[key]
            return cls(**kw)
        except TypeError as exc:  # wrong value shapes, e.g. a scalar where a list belongs
            raise InvalidConfig(str(exc)) from exc

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise InvalidConfig(f"config is not valid YAML: {exc}") from exc
        if data is not None and not isinstance(data, Mapping):
            raise InvalidConfig("config must be a mapping at the top level")
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        p = Path(path)
        if not p.is_file():
            raise InvalidConfig(f"config file not found: {p}")
        return cls.loads(p.read_text())

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def with_ssl(self, **changes) -> "ExperimentConfig":
        return replace(self, ssl=replace(self.ssl, **changes))
