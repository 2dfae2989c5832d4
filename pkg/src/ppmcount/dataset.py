"""Samples, P6 raster I/O, orthomosaic tiling, train/val/test splits and synthetic data."""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff.checkpoint import atomic_write
from .confmap import IMAGE, Annotation, PointSet, dump_annotations, load_annotations
from .metrics import density_group, tercile_bounds

SPLITS = ("train", "val", "test")
DENSITIES = ("low", "medium", "high")
UNASSIGNED = "unassigned"


@dataclass
class Sample:
    image_id: str
    image: np.ndarray  # (h, w, 3) uint8
    points: PointSet  # image space
    split: str = UNASSIGNED
    density: str = UNASSIGNED

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.image_id}: image must be (h, w, 3), got {self.image.shape}")
        h, w = self.image.shape[:2]
        if (self.points.width, self.points.height) != (w, h) or self.points.frame != IMAGE:
            raise ValueError(f"{self.image_id}: points frame does not match the {w}x{h} raster")

    @property
    def count(self) -> int:
        return len(self.points)


# -- P6 portable pixmap ------------------------------------------------------

_PNM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"P6 output needs an (h, w, 3) uint8 array, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    atomic_write(path, b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    pos = 0
    tokens = []
    while len(tokens) < 4:
        m = _PNM_TOKEN.match(blob, pos)
        if m is None:
            raise ValueError(f"{path}: truncated P6 header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary P6 pixmap")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit pixmaps are supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).copy()


# -- tiling ------------------------------------------------------------------

def tile(raster: np.ndarray, points: PointSet, patch: int = 512, overlap: int = 0,
         prefix: str = "tile") -> list[Sample]:
    """Cut a large raster into ``patch``-sized tiles on a regular grid.

    Tiles step by ``patch - overlap``; trailing margins narrower than a patch are
    dropped. A point goes to every tile whose half-open extent contains it, with
    coordinates rebased to that tile (with no overlap: exactly one tile).
    """
    h, w = raster.shape[:2]
    if h < patch or w < patch:
        raise ValueError(f"raster {w}x{h} is smaller than one {patch}px patch")
    if not 0 <= overlap < patch:
        raise ValueError(f"overlap must lie in [0, {patch})")
    step = patch - overlap
    pts = points.points
    tiles = []
    for ty, y0 in enumerate(range(0, h - patch + 1, step)):
        for tx, x0 in enumerate(range(0, w - patch + 1, step)):
            inside = ((pts[:, 0] >= x0) & (pts[:, 0] < x0 + patch)
                      & (pts[:, 1] >= y0) & (pts[:, 1] < y0 + patch)) if len(pts) else np.zeros(0, bool)
            local = pts[inside] - [x0, y0]
            tiles.append(Sample(
                image_id=f"{prefix}_{ty}_{tx}",
                image=np.ascontiguousarray(raster[y0:y0 + patch, x0:x0 + patch]),
                points=PointSet(local, patch, patch, IMAGE),
            ))
    return tiles


def tile_origin(image_id: str, patch: int = 512, overlap: int = 0) -> tuple[int, int]:
    """(x0, y0) of a tile produced by :func:`tile`."""
    _, ty, tx = image_id.rsplit("_", 2)
    step = patch - overlap
    return int(tx) * step, int(ty) * step


# -- splitting ---------------------------------------------------------------

def split_counts(total: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of ``total * fractions`` (ties go to earlier sets)."""
    raw = [total * f for f in fractions]
    counts = [math.floor(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _order_key(seed: int, image_id: str) -> bytes:
    return hashlib.blake2b(f"{seed}:{image_id}".encode(), digest_size=16).digest()


def split(samples: Sequence[Sample], fractions: Sequence[float] = (0.8516, 0.0742, 0.0742),
          seed: int = 0) -> list[Sample]:
    """Tag samples train/val/test.

    Samples are ordered by a keyed hash of ``(seed, image_id)`` and the ordered
    list is cut into consecutive runs sized by :func:`split_counts`. Because the
    order does not depend on the other samples, adding one sample moves only
    that sample plus at most one sample across each of the two cut points.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    ids = [s.image_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("image ids must be unique to split deterministically")
    order = sorted(range(len(samples)), key=lambda i: _order_key(seed, ids[i]))
    counts = split_counts(len(samples), fractions)
    tags = {}
    pos = 0
    for name, n in zip(SPLITS, counts):
        for i in order[pos:pos + n]:
            tags[i] = name
        pos += n
    return [replace(s, split=tags[i]) for i, s in enumerate(samples)]


def tag_density(samples: Sequence[Sample], bounds: Optional[tuple[int, int]] = None) -> list[Sample]:
    bounds = bounds or tercile_bounds([s.count for s in samples])
    return [replace(s, density=density_group(s.count, bounds)) for s in samples]


# -- synthetic data -----------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the disk-on-texture generator.

    ``placement="grid"`` puts objects in distinct cells of a ``grid_cell`` lattice
    with uniform jitter up to ``jitter`` px (planting-row-like layouts);
    ``"uniform"`` rejection-samples positions anywhere in the image.
    """

    n_samples: int = 200
    image_size: int = 64
    count_range: tuple = (5, 15)
    radius_range: tuple = (3.0, 5.0)
    placement: str = "grid"
    grid_cell: int = 16
    jitter: float = 3.0
    min_separation: float = 6.0
    background: tuple = (40, 110)
    foreground: tuple = (150, 230)
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        lo, hi = self.count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad count range {self.count_range}")
        if not 0 < self.radius_range[0] <= self.radius_range[1]:
            raise ValueError(f"bad radius range {self.radius_range}")
        if self.min_separation < 0:
            raise ValueError("min_separation must be >= 0")
        if self.placement not in ("grid", "uniform"):
            raise ValueError(f"placement must be 'grid' or 'uniform', got {self.placement!r}")
        if self.placement == "grid":
            cells = (self.image_size // self.grid_cell) ** 2
            if hi > cells:
                raise ValueError(f"{hi} objects do not fit {cells} grid cells")
            if self.grid_cell - 2 * self.jitter < self.min_separation:
                raise ValueError("grid_cell - 2*jitter must be >= min_separation")
            if self.jitter >= self.grid_cell / 2:
                raise ValueError("jitter must stay inside the cell")
        else:
            # densest packing of discs of diameter min_separation inside the image
            side = self.image_size + self.min_separation
            limit = 2 * side * side / (math.sqrt(3) * self.min_separation ** 2) if self.min_separation else math.inf
            if hi > limit:
                raise ValueError(f"{hi} objects at separation {self.min_separation} cannot fit "
                                 f"a {self.image_size}px image")


def _place(spec: SynthSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    if spec.placement == "grid":
        per_row = size // spec.grid_cell
        cells = rng.choice(per_row * per_row, size=count, replace=False)
        cy, cx = np.divmod(cells, per_row)
        offset = (size - per_row * spec.grid_cell) / 2
        centres = np.stack([cx, cy], axis=1) * spec.grid_cell + spec.grid_cell / 2 + offset
        return centres + rng.uniform(-spec.jitter, spec.jitter, size=(count, 2))
    for _ in range(spec.max_retries):
        pts = []
        for _ in range(count * 50):
            if len(pts) == count:
                break
            p = rng.uniform(0, size, size=2)
            if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= spec.min_separation ** 2 for q in pts):
                pts.append(p)
        if len(pts) == count:
            return np.array(pts).reshape(-1, 2)
    raise ValueError(f"could not place {count} objects at separation {spec.min_separation} in "
                     f"{size}px after {spec.max_retries} retries")


def _smooth_noise(rng: np.random.Generator, size: int, cell: int = 8) -> np.ndarray:
    coarse = rng.random((size // cell + 2, size // cell + 2))
    t = (np.arange(size) + 0.5) / cell
    i0 = np.floor(t).astype(int)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def render_sample(spec: SynthSpec, rng: np.random.Generator, image_id: str) -> Sample:
    size = spec.image_size
    count = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    centres = _place(spec, count, rng)
    centres = np.clip(centres, 0.0, np.nextafter(size, 0))

    bg_lo, bg_hi = spec.background
    base = bg_lo + (bg_hi - bg_lo) * _smooth_noise(rng, size)
    tint = np.array([1.0, 0.85, 0.6]) * rng.uniform(0.9, 1.1, size=3)
    img = base[..., None] * tint + rng.normal(0, 8, size=(size, size, 3))

    yy, xx = np.mgrid[0:size, 0:size]  # pixel (i, j) sits at coordinate (x=j, y=i)
    fg_lo, fg_hi = spec.foreground
    for cx, cy in centres:
        r = rng.uniform(*spec.radius_range)
        level = rng.uniform(fg_lo, fg_hi)
        colour = level * np.array([0.45, 1.0, 0.4]) * rng.uniform(0.9, 1.1, size=3)
        d = np.hypot(xx - cx, yy - cy)
        alpha = np.clip(r + 0.5 - d, 0.0, 1.0)  # anti-aliased edge
        shade = 1.0 - 0.35 * np.clip(d / r, 0, 1) ** 2  # brighter crown centre
        img = img * (1 - alpha[..., None]) + (colour * shade[..., None]) * alpha[..., None]
    raster = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Sample(image_id, raster, PointSet(centres, size, size, IMAGE))


def synthesize(spec: SynthSpec) -> list[Sample]:
    """Generate ``spec.n_samples`` samples; sample i uses the RNG seeded by ``(seed, i)``."""
    samples = [render_sample(spec, np.random.default_rng([spec.seed, i]), f"synth_{i:05d}")
               for i in range(spec.n_samples)]
    return tag_density(samples) if samples else samples


# -- on-disk datasets -----------------------------------------------------------

MANIFEST = "manifest.tsv"
ANNOTATIONS = "annotations.json"
_MANIFEST_HEADER = "image_id\timage_path\tsplit\tdensity\tcount"


def write_dataset(root, samples: Sequence[Sample]) -> None:
    """Write ``images/<id>.ppm``, ``annotations.json`` and ``manifest.tsv`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    anns = []
    lines = [_MANIFEST_HEADER]
    for s in samples:
        rel = f"images/{s.image_id}.ppm"
        write_ppm(root / rel, s.image)
        anns.append(Annotation(rel, s.points))
        lines.append(f"{s.image_id}\t{rel}\t{s.split}\t{s.density}\t{s.count}")
    atomic_write(root / ANNOTATIONS, dump_annotations(anns))
    atomic_write(root / MANIFEST, "\n".join(lines) + "\n")


def read_dataset(root) -> list[Sample]:
    root = Path(root)
    anns = {a.image_path: a for a in load_annotations(root / ANNOTATIONS)}
    manifest = root / MANIFEST
    if not manifest.exists():
        return [Sample(Path(p).stem, read_ppm(root / p), a.points) for p, a in anns.items()]
    lines = manifest.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _MANIFEST_HEADER:
        raise ValueError(f"{manifest}: unexpected header")
    samples = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{manifest}:{n}: expected 5 tab-separated fields")
        image_id, rel, split_tag, density, count = parts
        if rel not in anns:
            raise ValueError(f"{manifest}:{n}: {rel} has no annotation record")
        s = Sample(image_id, read_ppm(root / rel), anns[rel].points, split_tag, density)
        if s.count != int(count):
            raise ValueError(f"{manifest}:{n}: count {count} disagrees with {s.count} annotated points")
        samples.append(s)
    return samples
