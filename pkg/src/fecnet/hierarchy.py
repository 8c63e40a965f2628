"""Segment pyramids built from pooling-layer assignments.

Pooling layer ``l`` assigns each cell of its input grid to one of its output
cells. Because the output cell ``o`` of layer ``l`` is the input cell ``o`` of
layer ``l + 1``, chaining the assignments maps every stem block (and so every
image pixel) to one cluster per level. Clusters at level ``l`` are unions of
clusters at level ``l - 1``, which gives a linked coarsening of the image.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DomainError
from .records import AssignmentRecord

SCHEMA_VERSION = 1


@dataclass
class Segment:
    id: int
    pixels: np.ndarray  # flat indices into the H x W pixel grid
    chain: tuple[int, ...]  # this cluster's id, then its id at every coarser level
    children: tuple[int, ...] = ()  # ids of the finer-level clusters it unions


@dataclass
class PyramidLevel:
    level: int
    block_labels: np.ndarray  # (H0, W0) cluster id of each stem block
    pixel_labels: np.ndarray  # (H, W) cluster id of each pixel
    segments: dict[int, Segment] = field(default_factory=dict)

    @property
    def num_segments(self) -> int:
        return len(self.segments)


@dataclass
class SegmentPyramid:
    block_grid: tuple[int, int]
    base_block: int
    levels: list[PyramidLevel]
    records: list[AssignmentRecord]

    @property
    def pixel_grid(self) -> tuple[int, int]:
        return (self.block_grid[0] * self.base_block, self.block_grid[1] * self.base_block)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def level(self, level: int) -> PyramidLevel:
        if not 1 <= level <= len(self.levels):
            raise DomainError(f"level {level} outside 1..{len(self.levels)}")
        return self.levels[level - 1]

    def verify(self) -> None:
        """Check that every level partitions the pixels and unions its finer level."""
        total = self.pixel_grid[0] * self.pixel_grid[1]
        finer = {i: {i} for i in range(total)}  # level 0: single pixels
        for lvl in self.levels:
            seen = np.zeros(total, dtype=np.int64)
            for seg in lvl.segments.values():
                seen[seg.pixels] += 1
            if not np.all(seen == 1):
                raise ContractError(f"level {lvl.level} is not a partition of the pixel grid")
            current = {}
            for sid, seg in lvl.segments.items():
                members = set(seg.pixels.tolist())
                current[sid] = members
                if lvl.level == 1:
                    continue
                union = set().union(*(finer[c] for c in seg.children))
                if union != members:
                    raise ContractError(
                        f"level {lvl.level} segment {sid} is not the union of its children")
            finer = current


def pooling_records(records) -> list[AssignmentRecord]:
    return [r for r in records if r.kind == "pool"]


def build_pyramid(records, base_block: int = 4, index: int = 0) -> SegmentPyramid:
    """Link pooling assignments of image ``index`` into a segment pyramid.

    ``records`` may be the full forward-order record list; only pooling
    records are linked.
    """
    pools = pooling_records(records)
    if not pools:
        raise ContractError("no pooling records to link")
    for prev, nxt in zip(pools, pools[1:]):
        if tuple(nxt.input_grid) != tuple(prev.center_grid):
            raise ContractError(
                f"records are not consecutive: layer {prev.layer_id} emits {prev.center_grid}, "
                f"layer {nxt.layer_id} consumes {nxt.input_grid}")
    h0, w0 = pools[0].input_grid
    n0 = h0 * w0
    labels = np.arange(n0)
    block_levels = []
    for rec in pools:
        labels = rec.assignment[index][labels]
        block_levels.append(labels.copy())

    pixel_ids = np.arange(h0 * base_block * w0 * base_block).reshape(h0 * base_block, -1)
    levels = []
    for depth, lab in enumerate(block_levels, start=1):
        block_map = lab.reshape(h0, w0)
        pixel_map = np.repeat(np.repeat(block_map, base_block, 0), base_block, 1)
        segs = {}
        for sid in np.unique(pixel_map):
            chain = (int(sid),) + tuple(
                int(np.unique(block_levels[d - 1][lab == sid])[0])
                for d in range(depth + 1, len(block_levels) + 1))
            children = ()
            if depth > 1:
                children = tuple(int(c) for c in np.unique(block_levels[depth - 2][lab == sid]))
            segs[int(sid)] = Segment(int(sid), pixel_ids[pixel_map == sid], chain, children)
        levels.append(PyramidLevel(depth, block_map, pixel_map, segs))
    return SegmentPyramid((h0, w0), base_block, levels,
                          [r.select(index) for r in pools])


# -- k-means ----------------------------------------------------------------------

@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    history: list[float]  # inertia after every assignment step
    n_iter: int


def _sq_dists(x, centers):
    diff = x[:, None, :] - centers[None, :, :]
    return (diff * diff).sum(-1)


def _plusplus(x, k, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.uniform(0, total), side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx:idx + 1])[:, 0])
    return np.array(centers)


def kmeans(x, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-4) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds.

    Stops when the relative inertia decrease falls below ``tol``, when the
    labels stop changing, or after ``max_iter`` iterations. Empty clusters
    keep their previous center.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DomainError(f"expected (O, C) representatives, got shape {x.shape}")
    if not 1 <= k <= len(x):
        raise DomainError(f"k must lie in [1, {len(x)}], got {k}")
    rng = np.random.default_rng(seed)
    centers = _plusplus(x, k, rng)
    labels, history = None, []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        dist = _sq_dists(x, centers)
        new_labels = dist.argmin(1)
        inertia = float(dist[np.arange(len(x)), new_labels].sum())
        history.append(inertia)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(0)
        if len(history) > 1:
            prev = history[-2]
            if prev == 0 or (prev - inertia) / prev < tol:
                break
    dist = _sq_dists(x, centers)
    final = dist.argmin(1)
    inertia = float(dist[np.arange(len(x)), final].sum())
    if inertia < history[-1] or not np.array_equal(final, labels):
        history.append(inertia)
    return KMeansResult(final, centers, inertia, history, n_iter)


def kmeans_reduce(representatives, k: int, seed: int = 0) -> np.ndarray:
    """Group ``O`` representatives into ``k`` clusters; one label per representative."""
    reps = np.asarray(representatives)
    if reps.ndim == 3:
        if reps.shape[0] != 1:
            raise DomainError("pass the representatives of a single image")
        reps = reps[0]
    if k > len(reps):
        raise DomainError(f"k={k} exceeds the {len(reps)} representatives")
    return kmeans(reps, k, seed).labels


# -- rendering --------------------------------------------------------------------

def label_median_filter(labels, radius: int) -> np.ndarray:
    """Categorical median (window majority) over a ``(2r+1)^2`` square.

    Borders replicate edge labels; ties go to the smallest label.
    """
    labels = np.asarray(labels)
    if radius < 0:
        raise DomainError("radius must be non-negative")
    if radius == 0:
        return labels.copy()
    values = np.unique(labels)
    size = 2 * radius + 1
    best_count = np.full(labels.shape, -1)
    best = np.zeros_like(labels)
    for v in values:  # ascending, so strict '>' keeps the smallest label on ties
        mask = np.pad((labels == v).astype(np.int64), radius, mode="edge")
        c = mask.cumsum(0).cumsum(1)
        c = np.pad(c, ((1, 0), (1, 0)))
        counts = c[size:, size:] - c[:-size, size:] - c[size:, :-size] + c[:-size, :-size]
        take = counts > best_count
        best[take] = v
        best_count[take] = counts[take]
    return best


def palette(label_ids) -> np.ndarray:
    """Deterministic RGB colour (uint8) for each label id."""
    ids = np.asarray(label_ids).ravel()
    out = np.zeros((len(ids), 3), dtype=np.uint8)
    for i, lab in enumerate(ids):
        hue = (int(lab) * 0.618033988749895) % 1.0
        sat = 0.65 + 0.35 * ((int(lab) * 7) % 3) / 2
        out[i] = np.round(np.array(colorsys.hsv_to_rgb(hue, sat, 0.95)) * 255)
    return out


def colorize(labels) -> np.ndarray:
    labels = np.asarray(labels)
    uniq, inv = np.unique(labels, return_inverse=True)
    return palette(uniq)[inv].reshape(*labels.shape, 3)


@dataclass
class Segmentation:
    labels: np.ndarray  # (H, W) int
    colors: np.ndarray  # (H, W, 3) uint8


def render_segmentation(pyramid: SegmentPyramid, level: int, kmeans_labels=None,
                        median_filter_radius: int = 0) -> Segmentation:
    """Per-pixel labels of ``level``, optionally regrouped and smoothed."""
    labels = pyramid.level(level).pixel_labels
    if kmeans_labels is not None:
        labels = np.asarray(kmeans_labels)[labels]
    labels = label_median_filter(labels, median_filter_radius)
    return Segmentation(labels, colorize(labels))


def overlay(image, colors, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend a uint8 palette image over a uint8 RGB image."""
    image = np.asarray(image, dtype=np.float64)
    blend = (1 - alpha) * image + alpha * np.asarray(colors, dtype=np.float64)
    return np.clip(np.round(blend), 0, 255).astype(np.uint8)


# -- export -----------------------------------------------------------------------

def assignment_dump(records, index: int = 0) -> dict:
    return {
        "schema": "fecnet.assignments",
        "version": SCHEMA_VERSION,
        "layers": [r.to_dict(index) for r in records],
    }


def segmentation_dump(pyramid: SegmentPyramid, level: int, seg: Segmentation, **extra) -> dict:
    ids, counts = np.unique(seg.labels, return_counts=True)
    out = {
        "schema": "fecnet.segmentation",
        "version": SCHEMA_VERSION,
        "level": int(level),
        "num_levels": pyramid.num_levels,
        "image_size": list(seg.labels.shape),
        "base_block": pyramid.base_block,
        "segments": [{"label": int(i), "pixel_count": int(c)} for i, c in zip(ids, counts)],
        "labels": seg.labels.tolist(),
    }
    out.update(extra)
    return out


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def write_png(path, rgb) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path, optimize=False)
