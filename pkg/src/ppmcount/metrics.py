"""Counting and localization metrics: MAE, RMSE, R^2, precision, recall, F-measure."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

COLUMNS = ("MAE", "RMSE", "R2", "Precision", "Recall", "F-Measure")
GROUPS = ("low", "medium", "high")


@dataclass(frozen=True)
class ImageResult:
    image_id: str
    gt_count: int
    pred_count: int
    matches: int

    @property
    def false_positives(self) -> int:
        return self.pred_count - self.matches

    @property
    def false_negatives(self) -> int:
        return self.gt_count - self.matches

    def __post_init__(self):
        if not 0 <= self.matches <= min(self.gt_count, self.pred_count):
            raise ValueError(f"{self.image_id}: {self.matches} matches with {self.gt_count} gt / "
                             f"{self.pred_count} predictions")


def count_metrics(pairs: Sequence[tuple[float, float]]) -> tuple[float, float, float]:
    """(MAE, RMSE, R^2) over (ground truth, predicted) counts.

    R^2 is ``1 - SS_res / SS_tot`` around the ground-truth mean; NaN when the
    ground truth has zero variance.
    """
    if len(pairs) == 0:
        raise ValueError("count_metrics needs at least one (gt, pred) pair")
    g = np.array([p[0] for p in pairs], dtype=np.float64)
    p = np.array([p[1] for p in pairs], dtype=np.float64)
    err = g - p
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    ss_tot = float(np.sum((g - g.mean()) ** 2))
    r2 = 1.0 - float(np.sum(err * err)) / ss_tot if ss_tot > 0 else math.nan
    return mae, rmse, r2


def _augment(a: int, adj: list, pred_of: dict, seen: set) -> bool:
    for b in adj[a]:
        if b in seen:
            continue
        seen.add(b)
        if b not in pred_of or _augment(pred_of[b], adj, pred_of, seen):
            pred_of[b] = a
            return True
    return False


def match_pairs(gt, pred, radius: float) -> list[tuple[int, int]]:
    """One-to-one (gt index, pred index) pairs within ``radius``.

    Pairs are first taken greedily by ascending distance (ties by gt index, then
    prediction index). Greedy alone can strand a point whose only partner was
    taken by a closer pair, so the result is then completed with augmenting
    paths, which makes the number of pairs maximal.
    """
    g = np.asarray(getattr(gt, "points", gt), dtype=np.float64).reshape(-1, 2)
    q = np.asarray(getattr(pred, "points", pred), dtype=np.float64).reshape(-1, 2)
    if not len(g) or not len(q):
        return []
    d = np.sqrt(((g[:, None, :] - q[None, :, :]) ** 2).sum(-1))
    gi, pi = np.nonzero(d <= radius)
    order = np.lexsort((pi, gi, d[gi, pi]))
    pred_of: dict[int, int] = {}
    matched_g = set()
    for k in order:
        a, b = int(gi[k]), int(pi[k])
        if a not in matched_g and b not in pred_of:
            matched_g.add(a)
            pred_of[b] = a
    adj = [[] for _ in range(len(g))]
    for k in order:
        adj[int(gi[k])].append(int(pi[k]))
    for a in range(len(g)):
        if a not in matched_g and adj[a] and _augment(a, adj, pred_of, set()):
            matched_g.add(a)
    return sorted((a, b) for b, a in pred_of.items())


def match_points(gt, pred, radius: float, image_id: str = "") -> ImageResult:
    """Count one-to-one matches within ``radius`` (see :func:`match_pairs`)."""
    g = np.asarray(getattr(gt, "points", gt), dtype=np.float64).reshape(-1, 2)
    q = np.asarray(getattr(pred, "points", pred), dtype=np.float64).reshape(-1, 2)
    return ImageResult(image_id, len(g), len(q), len(match_pairs(g, q, radius)))


def prf(results: Sequence[ImageResult]) -> tuple[float, float, float]:
    """Micro-averaged precision, recall and F-measure (counts pooled over images)."""
    m = sum(r.matches for r in results)
    fp = sum(r.false_positives for r in results)
    fn = sum(r.false_negatives for r in results)
    precision = m / (m + fp) if m + fp else 0.0
    recall = m / (m + fn) if m + fn else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f


@dataclass
class CountingReport:
    n_images: int
    mae: float
    rmse: float
    r2: float
    precision: float
    recall: float
    f_measure: float
    groups: dict = field(default_factory=dict)
    bounds: Optional[tuple] = None

    def row(self) -> tuple:
        return (self.mae, self.rmse, self.r2, self.precision, self.recall, self.f_measure)


def summarize(results: Sequence[ImageResult]) -> CountingReport:
    mae, rmse, r2 = count_metrics([(r.gt_count, r.pred_count) for r in results])
    return CountingReport(len(results), mae, rmse, r2, *prf(results))


def tercile_bounds(counts: Sequence[int]) -> tuple[int, int]:
    """Upper count limits of the low and medium groups: sort, cut into thirds."""
    ordered = sorted(counts)
    if not ordered:
        raise ValueError("no counts to split")
    n = len(ordered)
    return ordered[max(0, n // 3 - 1)], ordered[max(0, (2 * n) // 3 - 1)]


def density_group(count: int, bounds: tuple[int, int]) -> str:
    low, medium = bounds
    return "low" if count <= low else "medium" if count <= medium else "high"


def density_split(results: Sequence[ImageResult], bounds: Optional[tuple[int, int]] = None):
    """Low/medium/high sub-reports keyed by ground-truth count; an empty group maps to None.

    ``bounds=(a, b)`` puts counts <= a in low, a < count <= b in medium and the
    rest in high. Without bounds, tercile limits are derived from the counts.
    """
    if bounds is None:
        bounds = tercile_bounds([r.gt_count for r in results])
    if bounds[0] > bounds[1]:
        raise ValueError(f"density boundaries must be ascending, got {bounds}")
    buckets: dict[str, list] = {g: [] for g in GROUPS}
    for r in results:
        buckets[density_group(r.gt_count, bounds)].append(r)
    return {g: (summarize(rs) if rs else None) for g, rs in buckets.items()}, tuple(bounds)


def build_report(results: Sequence[ImageResult], bounds: Optional[tuple[int, int]] = None) -> CountingReport:
    report = summarize(results)
    report.groups, report.bounds = density_split(results, bounds)
    return report


def _fmt(v: float) -> str:
    return "n/a" if math.isnan(v) else f"{v:.4f}"


def report_csv(report: CountingReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("group", "images") + COLUMNS)
    w.writerow(("all", report.n_images) + tuple(_fmt(v) for v in report.row()))
    for name in GROUPS:
        sub = report.groups.get(name)
        if sub is None:
            w.writerow((name, 0) + ("",) * len(COLUMNS))
        else:
            w.writerow((name, sub.n_images) + tuple(_fmt(v) for v in sub.row()))
    return buf.getvalue()


def report_table(report: CountingReport, header: Sequence[str] = ()) -> str:
    """Aligned plain-text table; columns follow MAE, RMSE, R2, Precision, Recall, F-Measure."""
    rows = [("Group", "Images") + COLUMNS]
    rows.append(("all", str(report.n_images)) + tuple(_fmt(v) for v in report.row()))
    for name in GROUPS:
        sub = report.groups.get(name)
        rows.append((name, "0") + ("empty",) + ("",) * (len(COLUMNS) - 1) if sub is None
                    else (name, str(sub.n_images)) + tuple(_fmt(v) for v in sub.row()))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = [f"# {h}" for h in header]
    if report.bounds is not None:
        lines.append(f"# density bounds: low <= {report.bounds[0]} < medium <= {report.bounds[1]} < high")
    for r in rows:
        lines.append("  ".join(cell.rjust(wd) for cell, wd in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"
