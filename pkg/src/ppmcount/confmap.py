"""Ground-truth confidence maps from point annotations, and the multi-stage loss."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, add, scale, sum_squared_error
from .autodiff.checkpoint import atomic_write

IMAGE = "image"
MAP = "map"

# Kernels are evaluated out to this many sigmas; beyond it exp(-r^2/2s^2) < e^-8.
TRUNCATE_SIGMAS = 4.0


@dataclass(frozen=True)
class SigmaSchedule:
    sigmas: tuple

    def __post_init__(self):
        if len(self.sigmas) < 1:
            raise ValueError("a sigma schedule needs at least one stage")
        if any(s <= 0 for s in self.sigmas):
            raise ValueError(f"sigmas must be positive: {self.sigmas}")

    def __len__(self) -> int:
        return len(self.sigmas)

    def __iter__(self):
        return iter(self.sigmas)

    def __getitem__(self, i):
        return self.sigmas[i]


def make_schedule(stages: int, sigma_max: float, sigma_min: float) -> SigmaSchedule:
    """Linearly spaced sigmas from ``sigma_max`` (stage 1) down to ``sigma_min`` (last stage).

    A single stage uses ``sigma_min``.
    """
    if stages < 1:
        raise ValueError(f"stage count must be >= 1, got {stages}")
    if not sigma_min > 0:
        raise ValueError(f"sigma_min must be positive, got {sigma_min}")
    if sigma_max < sigma_min:
        raise ValueError(f"sigma_max ({sigma_max}) must be >= sigma_min ({sigma_min})")
    if stages == 1:
        return SigmaSchedule((float(sigma_min),))
    step = (sigma_max - sigma_min) / (stages - 1)
    sigmas = [sigma_max - t * step for t in range(stages - 1)] + [sigma_min]
    return SigmaSchedule(tuple(float(s) for s in sigmas))


@dataclass(frozen=True)
class PointSet:
    """Object centres as continuous (x, y) coordinates inside a ``width`` x ``height`` frame."""

    points: np.ndarray
    width: float
    height: float
    frame: str = IMAGE

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)
        if self.frame not in (IMAGE, MAP):
            raise ValueError(f"unknown frame {self.frame!r}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"frame dims must be positive, got {self.width}x{self.height}")
        if len(pts):
            x, y = pts[:, 0], pts[:, 1]
            if np.any(x < 0) or np.any(x >= self.width) or np.any(y < 0) or np.any(y >= self.height):
                raise ValueError(f"points outside the {self.width}x{self.height} {self.frame} frame")

    def __len__(self) -> int:
        return len(self.points)


def to_map_space(points: PointSet, stride: float) -> PointSet:
    """Divide coordinates and frame dims by the stride; no rounding."""
    if points.frame != IMAGE:
        raise ValueError("to_map_space expects image-space points")
    return PointSet(points.points / stride, points.width / stride, points.height / stride, MAP)


@dataclass(frozen=True)
class ConfidenceMap:
    grid: np.ndarray
    stride: int = 1

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 2:
            raise ValueError(f"confidence map must be 2D, got shape {g.shape}")
        if g.size and (g.min() < 0.0 or g.max() > 1.0):
            raise ValueError("confidence values must lie in [0, 1]")
        object.__setattr__(self, "grid", g)

    @property
    def shape(self) -> tuple:
        return self.grid.shape


def render_gt_map(points: PointSet, sigma: float, out_h: int, out_w: int, stride: int = 1) -> ConfidenceMap:
    """Place a unit-peak Gaussian at every centre and combine overlaps by pointwise max.

    Pixel (row i, col j) sits at map coordinate (x=j, y=i). Each kernel is
    evaluated only within ``4 * sigma`` of its centre.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if points.frame != MAP:
        raise ValueError("render_gt_map expects map-space points")
    grid = np.zeros((out_h, out_w))
    radius = TRUNCATE_SIGMAS * sigma
    r2max = radius * radius
    inv = 1.0 / (2.0 * sigma * sigma)
    for cx, cy in points.points:
        x0, x1 = max(0, math.ceil(cx - radius)), min(out_w - 1, math.floor(cx + radius))
        y0, y1 = max(0, math.ceil(cy - radius)), min(out_h - 1, math.floor(cy + radius))
        if x0 > x1 or y0 > y1:
            continue
        dx2 = (np.arange(x0, x1 + 1) - cx) ** 2
        dy2 = (np.arange(y0, y1 + 1) - cy) ** 2
        d2 = dy2[:, None] + dx2[None, :]
        k = np.where(d2 <= r2max, np.exp(-d2 * inv), 0.0)
        np.maximum(grid[y0:y1 + 1, x0:x1 + 1], k, out=grid[y0:y1 + 1, x0:x1 + 1])
    return ConfidenceMap(grid, stride)


def stage_targets(pointsets: Sequence[PointSet], schedule: SigmaSchedule, out_h: int, out_w: int) -> list[np.ndarray]:
    """Per-stage ground-truth batches, each shaped (n, 1, out_h, out_w)."""
    targets = []
    for sigma in schedule:
        maps = [render_gt_map(p, sigma, out_h, out_w).grid for p in pointsets]
        targets.append(np.stack(maps)[:, None])
    return targets


def multi_stage_loss(preds: Sequence[Tensor], gts: Sequence) -> Tensor:
    """Sum over stages of the per-stage sum of squared errors, averaged over the batch."""
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predicted maps but {len(gts)} ground-truth maps")
    if not preds:
        raise ValueError("multi_stage_loss needs at least one stage")
    loss = None
    for pred, gt in zip(preds, gts):
        term = sum_squared_error(pred, gt if isinstance(gt, Tensor) else Tensor(gt))
        loss = term if loss is None else add(loss, term)
    n = preds[0].shape[0] if preds[0].ndim == 4 else 1
    return scale(loss, 1.0 / n) if n != 1 else loss


# -- annotation files -------------------------------------------------------

ANNOTATION_SCHEMA_DOC = """\
A JSON array of records, one per image:
  {"image_path": str, "width": int > 0, "height": int > 0, "points": [[x, y], ...]}
Coordinates are image-space pixels with 0 <= x < width and 0 <= y < height."""


@dataclass(frozen=True)
class Annotation:
    image_path: str
    points: PointSet


def _check_record(i: int, rec) -> Annotation:
    if not isinstance(rec, dict):
        raise ValueError(f"record {i}: expected an object, got {type(rec).__name__}")
    extra = set(rec) - {"image_path", "width", "height", "points"}
    missing = {"image_path", "width", "height", "points"} - set(rec)
    if missing or extra:
        raise ValueError(f"record {i}: missing keys {sorted(missing)}, unknown keys {sorted(extra)}")
    if not isinstance(rec["image_path"], str) or not rec["image_path"]:
        raise ValueError(f"record {i}: image_path must be a non-empty string")
    for key in ("width", "height"):
        v = rec[key]
        if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
            raise ValueError(f"record {i}: {key} must be a positive integer")
    pts = rec["points"]
    if not isinstance(pts, list) or any(
        not isinstance(p, list) or len(p) != 2 or not all(isinstance(c, (int, float)) and not isinstance(c, bool)
                                                         for c in p)
        for p in pts
    ):
        raise ValueError(f"record {i}: points must be a list of [x, y] number pairs")
    try:
        ps = PointSet(np.array(pts, dtype=float).reshape(-1, 2), rec["width"], rec["height"], IMAGE)
    except ValueError as exc:
        raise ValueError(f"record {i} ({rec['image_path']}): {exc}") from None
    return Annotation(rec["image_path"], ps)


def parse_annotations(doc) -> list[Annotation]:
    if not isinstance(doc, list):
        raise ValueError("annotation document must be a JSON array")
    return [_check_record(i, rec) for i, rec in enumerate(doc)]


def load_annotations(path) -> list[Annotation]:
    with open(path, encoding="utf-8") as fh:
        return parse_annotations(json.load(fh))


def dump_annotations(annotations: Sequence[Annotation]) -> str:
    doc = [
        {
            "image_path": a.image_path,
            "width": int(a.points.width),
            "height": int(a.points.height),
            "points": [[float(x), float(y)] for x, y in a.points.points],
        }
        for a in annotations
    ]
    return json.dumps(doc, indent=1)


def save_annotations(path, annotations: Sequence[Annotation]) -> None:
    atomic_write(Path(path), dump_annotations(annotations))
