"""Object positions from the last-stage confidence map."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff.checkpoint import atomic_write


@dataclass(frozen=True)
class PeakParams:
    tau: float = 0.35
    delta: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")


@dataclass(frozen=True)
class Detection:
    position: tuple  # (x, y) map space
    confidence: float
    image_position: tuple  # (x, y) image space


def map_to_image(x: float, y: float, stride: float) -> tuple:
    return ((x + 0.5) * stride - 0.5, (y + 0.5) * stride - 0.5)


def find_peaks(grid: np.ndarray, params: PeakParams = PeakParams(), stride: float = 1) -> list[Detection]:
    """Strict 4-neighbour local maxima above ``tau``, thinned so kept peaks are more than ``delta`` apart.

    Border cells compare only against in-bounds neighbours, so a plateau yields
    no peak. Candidates are visited by decreasing confidence (row-major on ties)
    and kept greedily.
    """
    c = np.asarray(getattr(grid, "grid", grid), dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"find_peaks expects a 2D map, got shape {c.shape}")
    if c.size == 0:
        return []
    padded = np.pad(c, 1, constant_values=-np.inf)
    centre = padded[1:-1, 1:-1]
    is_peak = ((centre > padded[:-2, 1:-1]) & (centre > padded[2:, 1:-1])
               & (centre > padded[1:-1, :-2]) & (centre > padded[1:-1, 2:]) & (c > params.tau))
    ys, xs = np.nonzero(is_peak)  # row-major order
    conf = c[ys, xs]
    order = np.argsort(-conf, kind="stable")
    kept: list[tuple[int, int]] = []
    d2 = params.delta * params.delta
    out = []
    for i in order:
        x, y = int(xs[i]), int(ys[i])
        if all((x - kx) ** 2 + (y - ky) ** 2 > d2 for kx, ky in kept):
            kept.append((x, y))
            out.append(Detection((float(x), float(y)), float(conf[i]), map_to_image(x, y, stride)))
    return out


def to_image_space(dets: Sequence[Detection], stride: float) -> list[Detection]:
    """Recompute image positions with the half-pixel-centre mapping ``(p + 0.5) * s - 0.5``."""
    return [Detection(d.position, d.confidence, map_to_image(*d.position, stride)) for d in dets]


CSV_HEADER = ("image_id", "x_image", "y_image", "confidence")


def detections_csv(rows: Iterable[tuple[str, Sequence[Detection]]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for image_id, dets in rows:
        for d in dets:
            x, y = d.image_position
            writer.writerow([image_id, f"{x:.6f}", f"{y:.6f}", f"{d.confidence:.6f}"])
    return buf.getvalue()


def write_detections(path, rows: Iterable[tuple[str, Sequence[Detection]]]) -> None:
    atomic_write(path, detections_csv(rows))


def read_detections(path) -> dict[str, np.ndarray]:
    """image_id -> (k, 2) array of image-space positions."""
    out: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for row in reader:
            if not row:
                continue
            out.setdefault(row[0], []).append((float(row[1]), float(row[2])))
    return {k: np.array(v).reshape(-1, 2) for k, v in out.items()}
