"""Benchmark construction: disjoint-ball tasks, species-count grids and
prior-training corpora."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .domain import GridSpec, SearchTask, make_task
from .memory_permanent import GaussianMixtureScore, TrainBuffer
from .schedule import NoiseSchedule


class PlacementError(RuntimeError):
    pass


def disk_offsets(radius: int) -> np.ndarray:
    """Integer (dy, dx) with dy^2 + dx^2 <= radius^2."""
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    keep = dy ** 2 + dx ** 2 <= radius ** 2
    return np.stack([dy[keep], dx[keep]], axis=1)


@dataclass(frozen=True)
class BallsTaskSpec:
    seed: int = 0
    count: int | None = None        # drawn from [5, 10] when None
    radius: int | None = None       # drawn from {3, 4} when None
    size: int = 32
    patch: int = 1
    budget: int = 250
    max_retries: int = 200

    def __post_init__(self):
        if self.count is not None and not 1 <= self.count:
            raise ValueError("ball count must be positive")
        if self.radius is not None and self.radius < 1:
            raise ValueError("radius must be positive")
        if self.radius is not None and 2 * self.radius + 1 > self.size:
            raise ValueError("ball does not fit in the grid")


def _place_balls(rng, size, count, radius, max_retries):
    offs = disk_offsets(radius)
    for _ in range(max_retries):
        img = np.zeros((size, size), dtype=np.uint8)
        ok = True
        for _ in range(count):
            for _ in range(100):
                cy, cx = rng.integers(radius, size - radius, size=2)
                ys, xs = offs[:, 0] + cy, offs[:, 1] + cx
                if not img[ys, xs].any():
                    img[ys, xs] = 1
                    break
            else:
                ok = False
                break
        if ok:
            return img
    raise PlacementError(f"could not place {count} disjoint balls of radius {radius}")


def balls_image(spec: BallsTaskSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    count = spec.count if spec.count is not None else int(rng.integers(5, 11))
    radius = spec.radius if spec.radius is not None else int(rng.choice([3, 4]))
    return _place_balls(rng, spec.size, count, radius, spec.max_retries)


def gen_balls_task(spec: BallsTaskSpec) -> SearchTask:
    img = balls_image(spec)
    grid = GridSpec(spec.size, spec.size, spec.patch, spec.patch)
    return make_task(img.astype(float), img, grid, spec.budget, name=f"balls-{spec.seed}")


# ------------------------------------------------------------------- species

@dataclass
class SpeciesGrid:
    counts: np.ndarray
    region: tuple[float, float, float, float]   # lat_min, lat_max, lon_min, lon_max
    skipped: int = 0
    block: tuple[int, int] = (2, 2)
    meta: dict = field(default_factory=dict)


def read_species_rows(path) -> list[tuple[float, float, float]]:
    """Rows ``lat,lon,count`` from a delimited text file (header optional)."""
    rows = []
    with open(Path(path), newline="") as fh:
        sample = fh.read(2048)
        fh.seek(0)
        dialect = csv.Sniffer().sniff(sample, delimiters=",;\t ") if sample.strip() else csv.excel
        for rec in csv.reader(fh, dialect):
            if not rec:
                continue
            try:
                rows.append((float(rec[0]), float(rec[1]), float(rec[2])))
            except ValueError:
                continue  # header or malformed line
    return rows


def ingest_species_csv(rows: Iterable, region, size: int = 64) -> SpeciesGrid:
    """Bin (lat, lon, count) records into a ``size x size`` grid over *region*.

    Row 0 is the northern edge. Records outside the region are counted in
    ``skipped``.
    """
    lat_min, lat_max, lon_min, lon_max = map(float, region)
    if not (lat_max > lat_min and lon_max > lon_min):
        raise ValueError("degenerate region")
    if isinstance(rows, (str, Path)):
        rows = read_species_rows(rows)
    rows = list(rows)
    if not rows:
        raise ValueError("no species records")
    counts = np.zeros((size, size), dtype=np.int64)
    skipped = 0
    for lat, lon, n in rows:
        if not (lat_min <= lat <= lat_max and lon_min <= lon <= lon_max):
            skipped += 1
            continue
        r = min(int((lat_max - lat) / (lat_max - lat_min) * size), size - 1)
        c = min(int((lon - lon_min) / (lon_max - lon_min) * size), size - 1)
        counts[r, c] += int(n)
    return SpeciesGrid(counts, (lat_min, lat_max, lon_min, lon_max), skipped)


def species_to_task(grid: SpeciesGrid, threshold: int = 1, budget: int = 250) -> SearchTask:
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    counts = grid.counts
    if counts.max() <= 0:
        raise ValueError("species grid is all zero")
    content = counts / counts.max()
    mask = (counts >= threshold).astype(np.uint8)
    h, w = counts.shape
    spec = GridSpec(h, w, *grid.block)
    return make_task(content, mask, spec, budget, name="species")


# --------------------------------------------------------------- corpora

def _segment_distance(yy, xx, p, q):
    d = q - p
    L2 = float(d @ d) or 1e-12
    s = np.clip(((yy - p[0]) * d[0] + (xx - p[1]) * d[1]) / L2, 0.0, 1.0)
    return np.hypot(yy - (p[0] + s * d[0]), xx - (p[1] + s * d[1]))


def digit_like_image(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Handwriting-like glyph: 2-4 thick connected strokes in a centred box."""
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    lo, hi = 0.2 * size, 0.8 * size
    n_pts = int(rng.integers(3, 6))
    pts = [rng.uniform(lo, hi, size=2)]
    for _ in range(n_pts - 1):
        step = rng.normal(0, 0.25 * size, size=2)
        pts.append(np.clip(pts[-1] + step, lo, hi))
    width = rng.uniform(1.0, 1.8)
    dist = np.full((size, size), np.inf)
    for p, q in zip(pts[:-1], pts[1:]):
        dist = np.minimum(dist, _segment_distance(yy, xx, p, q))
    return np.clip(1.0 + width - dist, 0.0, 1.0)


def reference_gmm_means(shape=(32, 32), k: int = 4, seed: int = 1234) -> np.ndarray:
    """Smooth blob images used as the canonical mixture means."""
    rng = np.random.default_rng(seed)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    means = np.zeros((k, h, w))
    for i in range(k):
        for _ in range(3):
            cy, cx = rng.uniform(0.2, 0.8, size=2) * (h, w)
            s = rng.uniform(2.0, 4.0)
            means[i] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return np.clip(means, 0.0, 1.0)


def reference_gmm(schedule: NoiseSchedule, shape=(32, 32), k: int = 4, var: float = 0.01,
                  seed: int = 1234) -> GaussianMixtureScore:
    means = reference_gmm_means(shape, k, seed)
    return GaussianMixtureScore(means, np.full(k, 1.0 / k), var, schedule)


CORPUS_KINDS = ("gmm-draws", "balls", "digits-like")


def gen_prior_corpus(kind: str, n: int, seed: int = 0, shape=(32, 32),
                     gmm: GaussianMixtureScore | None = None) -> TrainBuffer:
    """*n* training grids of the given kind, deterministic per seed.

    ``gmm-draws`` are exact (unclipped) draws from *gmm*, defaulting to
    ``reference_gmm``; the other kinds lie in [0, 1].
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "gmm-draws":
        if gmm is None:
            gmm = reference_gmm(NoiseSchedule.linear(), shape)
        return TrainBuffer(gmm.sample(n, rng))
    if kind == "balls":
        seeds = rng.integers(0, 2 ** 31, size=n)
        return TrainBuffer(np.stack([balls_image(BallsTaskSpec(seed=int(s), size=shape[0]))
                                     for s in seeds]).astype(float))
    if kind == "digits-like":
        return TrainBuffer(np.stack([digit_like_image(rng, shape[0]) for _ in range(n)]))
    raise ValueError(f"unknown corpus kind {kind!r}; expected one of {CORPUS_KINDS}")
