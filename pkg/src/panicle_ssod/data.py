"""Dataset model, synthetic panicle generator, tiling, splits and augmentation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .exceptions import DegenerateBox, EmptySplit, InvalidConfig
from .geometry import Box, boxes_to_array, iou

logger = logging.getLogger(__name__)

ANNOTATION_FILE = "annotations.jsonl"
IMAGE_DIR = "images"


@dataclass
class LabeledImage:
    """An RGB image in ``[0, 1]`` with its (possibly empty) box annotations."""

    id: str
    pixels: np.ndarray
    boxes: list[Box] = field(default_factory=list)
    source_offset: tuple[int, int] | None = None

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise InvalidConfig(f"image {self.id}: expected HxWx3 pixels, got {self.pixels.shape}")
        h, w = self.height, self.width
        for b in self.boxes:
            if b.x_min < 0 or b.y_min < 0 or b.x_max > w or b.y_max > h:
                raise InvalidConfig(f"image {self.id}: box {b.as_tuple()} outside {w}x{h}")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def box_array(self) -> np.ndarray:
        return boxes_to_array(self.boxes)


@dataclass
class UnlabeledImage:
    id: str
    pixels: np.ndarray

    @classmethod
    def from_labeled(cls, image: LabeledImage) -> "UnlabeledImage":
        return cls(image.id, image.pixels)


@dataclass(frozen=True)
class DatasetSplit:
    fraction: float
    seed: int
    labeled_ids: tuple[str, ...]
    unlabeled_ids: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "fraction": self.fraction,
            "seed": self.seed,
            "labeled": list(self.labeled_ids),
            "unlabeled": list(self.unlabeled_ids),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetSplit":
        return cls(
            fraction=float(obj["fraction"]),
            seed=int(obj["seed"]),
            labeled_ids=tuple(obj["labeled"]),
            unlabeled_ids=tuple(obj["unlabeled"]),
        )


@dataclass(frozen=True)
class AugmentationSpec:
    """Parameter ranges for the weak (flip) and strong (flip + photometric + cutout) views.

    ``brightness`` is the half-width of an additive shift, ``contrast`` the
    half-width of a multiplicative factor around 1.
    """

    kind: str = "strong"
    flip_prob: float = 0.5
    brightness: float = 0.15
    contrast: float = 0.25
    cutout_count: tuple[int, int] = (1, 3)
    cutout_size: tuple[int, int] = (6, 16)

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise InvalidConfig(f"unknown augmentation kind {self.kind!r}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise InvalidConfig("flip_prob must lie in [0, 1]")
        if not (0.0 <= self.brightness <= 1.0 and 0.0 <= self.contrast <= 1.0):
            raise InvalidConfig("brightness/contrast jitter must lie in [0, 1]")
        lo, hi = self.cutout_count
        if not 0 <= lo <= hi:
            raise InvalidConfig("cutout_count must be a non-empty, non-negative range")
        lo, hi = self.cutout_size
        if not 1 <= lo <= hi:
            raise InvalidConfig("cutout_size must be a non-empty range of positive sizes")


WEAK = AugmentationSpec(kind="weak", brightness=0.0, contrast=0.0, cutout_count=(0, 0))
STRONG = AugmentationSpec()


# ---------------------------------------------------------------------------
# synthetic data


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Low-frequency noise in [0, 1] by bilinear upsampling of a coarse grid."""
    coarse = rng.random((cells + 1, cells + 1))
    t = np.linspace(0, cells, size, endpoint=False) + 0.5 * cells / size
    i = np.floor(t).astype(int)
    f = t - i
    rows = coarse[i] * (1 - f)[:, None] + coarse[np.minimum(i + 1, cells)] * f[:, None]
    out = rows[:, i] * (1 - f)[None, :] + rows[:, np.minimum(i + 1, cells)] * f[None, :]
    return out


def _ellipse_field(size: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    """Normalised ellipse radius at every pixel centre (1 on the boundary)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return np.sqrt(u * u + v * v)


def _ellipse_extent(a: float, b: float, theta: float) -> tuple[float, float]:
    c, s = math.cos(theta), math.sin(theta)
    return math.sqrt((a * c) ** 2 + (b * s) ** 2), math.sqrt((a * s) ** 2 + (b * c) ** 2)


def render_synthetic_image(
    rng: np.random.Generator,
    image_size: int,
    n_blobs: int,
    blob_size_range: tuple[float, float],
    n_distractors: int = 4,
) -> tuple[np.ndarray, list[Box], list[tuple[float, float]]]:
    """Draw one field image; returns pixels, blob boxes and blob centroids."""
    s = image_size
    green = np.array([0.22, 0.42, 0.16])
    soil = np.array([0.42, 0.33, 0.22])
    mix = _smooth_noise(rng, s, 4)[..., None]
    img = green * (1 - mix) + soil * mix
    img = img * (0.85 + 0.3 * _smooth_noise(rng, s, 16)[..., None])
    img = img + rng.normal(0.0, 0.03, size=(s, s, 3))

    # leaf-like distractors: elongated, darker, greener than panicles
    for _ in range(n_distractors):
        a = rng.uniform(6, 20)
        b = a * rng.uniform(0.15, 0.35)
        cx, cy = rng.uniform(0, s, size=2)
        r = _ellipse_field(s, cx, cy, a, b, rng.uniform(0, math.pi))
        alpha = np.clip((1.0 - r) * 4.0, 0.0, 1.0)[..., None]
        tone = np.array([0.30, 0.55, 0.20]) * rng.uniform(0.8, 1.3)
        img = img * (1 - alpha) + tone * alpha

    boxes: list[Box] = []
    centroids: list[tuple[float, float]] = []
    lo, hi = blob_size_range
    for _ in range(n_blobs):
        for attempt in range(50):
            major = rng.uniform(lo, hi)
            a = major / 2.0
            b = a * rng.uniform(0.45, 1.0)
            theta = rng.uniform(0, math.pi)
            ex, ey = _ellipse_extent(a, b, theta)
            cx = rng.uniform(ex, s - ex)
            cy = rng.uniform(ey, s - ey)
            cand = Box(cx - ex, cy - ey, cx + ex, cy + ey)
            if attempt == 49 or all(iou(cand, o) <= 0.05 for o in boxes):
                break
        r = _ellipse_field(s, cx, cy, a, b, theta)
        alpha = np.clip((1.0 - r) / 0.2, 0.0, 1.0)
        grain = 0.75 + 0.5 * rng.random((s, s))
        tone = np.array([0.80, 0.66, 0.38]) * rng.uniform(0.85, 1.15)
        blob = tone[None, None, :] * grain[..., None]
        img = img * (1 - alpha[..., None]) + blob * alpha[..., None]
        boxes.append(cand)
        centroids.append((cx, cy))

    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img.astype(np.float32), boxes, centroids


def generate_synthetic_dataset(
    count: int,
    image_size: int = 128,
    blob_count_range: tuple[int, int] = (1, 8),
    blob_size_range: tuple[float, float] = (8.0, 28.0),
    seed: int = 0,
    prefix: str = "synth",
) -> list[LabeledImage]:
    """Generate ``count`` images of bright elliptical clusters on a field texture.

    Each image uses its own random stream derived from ``(seed, index)``, so
    any image can be regenerated alone and the result does not depend on
    generation order.
    """
    if count <= 0:
        raise InvalidConfig("count must be positive")
    lo, hi = blob_count_range
    if not 0 <= lo <= hi:
        raise InvalidConfig(f"blob_count_range {blob_count_range} is empty")
    slo, shi = blob_size_range
    if not 0 < slo <= shi:
        raise InvalidConfig(f"blob_size_range {blob_size_range} is empty")
    if shi >= image_size:
        raise InvalidConfig("blob size exceeds image size")
    out = []
    for idx in range(count):
        rng = np.random.default_rng([seed, idx])
        k = int(rng.integers(lo, hi + 1))
        n_distractors = int(rng.integers(2, 7))
        pixels, boxes, _ = render_synthetic_image(rng, image_size, k, blob_size_range, n_distractors)
        out.append(LabeledImage(f"{prefix}_{idx:05d}", pixels, boxes))
    return out


# ---------------------------------------------------------------------------
# tiling / splits / resize


def _tile_starts(length: int, tile: int, stride: int) -> list[int]:
    starts = list(range(0, length - tile + 1, stride))
    if starts[-1] + tile < length:
        starts.append(length - tile)
    return starts


def tile_orthomosaic(
    mosaic: np.ndarray,
    tile_size: int,
    overlap: int = 0,
    boxes: Sequence[Box] | None = None,
    prefix: str = "tile",
    min_visible: float = 0.5,
) -> list[LabeledImage]:
    """Cut a large image into full-size square tiles.

    The last tile on each axis is shifted inward to the mosaic edge instead of
    being padded. When mosaic-level ``boxes`` are given, each tile receives the
    clipped boxes that keep at least ``min_visible`` of their area. Float
    mosaics are tiled as views (no copy); uint8 mosaics are rescaled to [0, 1].
    """
    if not 0 <= overlap < tile_size:
        raise InvalidConfig("need tile_size > overlap >= 0")
    h, w = mosaic.shape[:2]
    if h < tile_size or w < tile_size:
        raise InvalidConfig(f"mosaic {w}x{h} smaller than tile size {tile_size}")
    stride = tile_size - overlap
    src = boxes_to_array(boxes or [])
    tiles = []
    for y0 in _tile_starts(h, tile_size, stride):
        for x0 in _tile_starts(w, tile_size, stride):
            pix = mosaic[y0:y0 + tile_size, x0:x0 + tile_size, :3]
            if pix.dtype == np.uint8:
                pix = pix.astype(np.float32) / 255.0
            tile_boxes = []
            for x_min, y_min, x_max, y_max in src:
                cx0, cy0 = max(x_min - x0, 0.0), max(y_min - y0, 0.0)
                cx1, cy1 = min(x_max - x0, tile_size), min(y_max - y0, tile_size)
                if cx1 <= cx0 or cy1 <= cy0:
                    continue
                if (cx1 - cx0) * (cy1 - cy0) < min_visible * (x_max - x_min) * (y_max - y_min):
                    continue
                tile_boxes.append(Box(cx0, cy0, cx1, cy1))
            tiles.append(LabeledImage(f"{prefix}_{y0}_{x0}", pix, tile_boxes, source_offset=(x0, y0)))
    return tiles


def split_count(n_total: int, fraction: float) -> int:
    # tolerance guards products such as 0.29 * 100 = 28.999999999999996
    return int(math.floor(fraction * n_total + 1e-9))


def make_split(dataset: Sequence[LabeledImage] | Sequence[str], fraction: float, seed: int) -> DatasetSplit:
    """Uniformly choose ``floor(fraction * N)`` labeled ids; the rest are unlabeled."""
    if not 0.0 < fraction <= 1.0:
        raise InvalidConfig(f"fraction {fraction} outside (0, 1]")
    ids = [d if isinstance(d, str) else d.id for d in dataset]
    if len(set(ids)) != len(ids):
        raise InvalidConfig("dataset ids are not unique")
    n = split_count(len(ids), fraction)
    if n == 0:
        raise EmptySplit(f"fraction {fraction} of {len(ids)} images selects nothing")
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(ids), size=n, replace=False).tolist())
    labeled = tuple(i for k, i in enumerate(ids) if k in chosen)
    unlabeled = tuple(i for k, i in enumerate(ids) if k not in chosen)
    return DatasetSplit(fraction, seed, labeled, unlabeled)


def _bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with pixel-centre alignment (half-pixel offsets)."""
    h, w = pixels.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    p = pixels.astype(np.float64)
    top = p[y0][:, x0] * (1 - fx) + p[y0][:, x1] * fx
    bot = p[y1][:, x0] * (1 - fx) + p[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(pixels.dtype)


def resize(image: LabeledImage, target: int) -> LabeledImage:
    """Resize to ``target x target``; boxes follow the per-axis scale factors.

    Boxes that shrink below one pixel on either side are dropped and counted
    in a warning.
    """
    if target <= 0:
        raise InvalidConfig("target must be positive")
    h, w = image.height, image.width
    if h == target and w == target:
        return image
    sx, sy = target / w, target / h
    pixels = _bilinear(image.pixels, target, target)
    boxes, dropped = [], 0
    for b in image.boxes:
        x0, y0 = b.x_min * sx, b.y_min * sy
        x1, y1 = min(b.x_max * sx, target), min(b.y_max * sy, target)
        if x1 - x0 < 1.0 or y1 - y0 < 1.0:
            dropped += 1
            continue
        boxes.append(Box(x0, y0, x1, y1))
    if dropped:
        logger.warning("resize(%s): dropped %d degenerate box(es)", image.id, dropped)
    return LabeledImage(image.id, pixels, boxes, image.source_offset)


def resize_box(b: Box, sx: float, sy: float) -> Box:
    out = (b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy)
    if out[2] - out[0] < 1.0 or out[3] - out[1] < 1.0:
        raise DegenerateBox(f"box {b.as_tuple()} collapses below one pixel")
    return Box(*out)


# ---------------------------------------------------------------------------
# augmentation


def hflip(pixels: np.ndarray, boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w = pixels.shape[1]
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    flipped = boxes.copy()
    flipped[:, 0] = w - boxes[:, 2]
    flipped[:, 2] = w - boxes[:, 0]
    return pixels[:, ::-1].copy(), flipped


def augment_weak(
    pixels: np.ndarray,
    boxes: np.ndarray,
    rng: np.random.Generator,
    spec: AugmentationSpec = WEAK,
    force_flip: bool | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Random horizontal flip. Always consumes one draw from ``rng``."""
    draw = rng.random()
    flip = draw < spec.flip_prob if force_flip is None else force_flip
    if flip:
        return hflip(pixels, boxes)
    return pixels, np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def photometric(pixels: np.ndarray, rng: np.random.Generator, spec: AugmentationSpec = STRONG) -> np.ndarray:
    """Brightness/contrast jitter then cutout; box geometry is unaffected."""
    c = 1.0 + rng.uniform(-spec.contrast, spec.contrast)
    shift = rng.uniform(-spec.brightness, spec.brightness)
    mean = pixels.mean()
    out = np.clip((pixels - mean) * c + mean + shift, 0.0, 1.0).astype(pixels.dtype)
    h, w = out.shape[:2]
    n_cut = int(rng.integers(spec.cutout_count[0], spec.cutout_count[1] + 1))
    for _ in range(n_cut):
        size = int(rng.integers(spec.cutout_size[0], spec.cutout_size[1] + 1))
        y = int(rng.integers(0, max(h - size, 0) + 1))
        x = int(rng.integers(0, max(w - size, 0) + 1))
        out[y:y + size, x:x + size] = 0.0
    return out


def augment_strong(
    pixels: np.ndarray,
    boxes: np.ndarray,
    rng: np.random.Generator,
    spec: AugmentationSpec = STRONG,
    force_flip: bool | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    pixels, boxes = augment_weak(pixels, boxes, rng, spec, force_flip)
    return photometric(pixels, rng, spec), boxes


# ---------------------------------------------------------------------------
# file formats


def write_dataset(directory: str | Path, images: Iterable[LabeledImage]) -> Path:
    """Write ``annotations.jsonl`` plus ``images/<id>.png`` under ``directory``."""
    directory = Path(directory)
    (directory / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    with open(directory / ANNOTATION_FILE, "w") as fh:
        for im in images:
            rec = {
                "id": im.id,
                "width": im.width,
                "height": im.height,
                "boxes": [list(b.as_tuple()) for b in im.boxes],
            }
            fh.write(json.dumps(rec) + "\n")
            arr = np.round(np.clip(im.pixels, 0, 1) * 255).astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(directory / IMAGE_DIR / f"{im.id}.png")
    return directory


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def read_dataset(directory: str | Path) -> list[LabeledImage]:
    directory = Path(directory)
    ann = directory / ANNOTATION_FILE
    if not ann.exists():
        raise InvalidConfig(f"no {ANNOTATION_FILE} in {directory}")
    out = []
    with open(ann) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            pixels = read_png(directory / IMAGE_DIR / f"{rec['id']}.png")
            if pixels.shape[:2] != (rec["height"], rec["width"]):
                raise InvalidConfig(f"image {rec['id']} size disagrees with its annotation")
            out.append(LabeledImage(rec["id"], pixels, [Box(*b) for b in rec["boxes"]]))
    ids = [im.id for im in out]
    if len(set(ids)) != len(ids):
        raise InvalidConfig(f"duplicate ids in {ann}")
    return out


def write_split(path: str | Path, split: DatasetSplit) -> None:
    Path(path).write_text(json.dumps(split.to_json(), indent=2) + "\n")


def read_split(path: str | Path) -> DatasetSplit:
    return DatasetSplit.from_json(json.loads(Path(path).read_text()))
