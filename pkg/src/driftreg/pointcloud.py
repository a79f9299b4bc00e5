"""Point-set containers, file I/O, farthest point sampling and kNN graphs.

Point sets are plain ``(N, 3)`` float64 arrays in millimetres; row order
identifies points everywhere in the pipeline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PointSetError(ValueError):
    """Base class for point-set input problems."""


class EmptyInput(PointSetError):
    pass


class MalformedRow(PointSetError):
    def __init__(self, line, text=""):
        super().__init__(f"malformed row at line {line}: {text!r}")
        self.line = line


class NonFiniteValue(PointSetError):
    def __init__(self, line):
        super().__init__(f"non-finite coordinate at line {line}")
        self.line = line


def as_points(points, name="points"):
    """Validate and return an ``(N, 3)`` float64 array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise PointSetError(f"{name} must have shape (N, 3), got {arr.shape}")
    if len(arr) == 0:
        raise EmptyInput(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise PointSetError(f"{name} contains non-finite coordinates")
    return arr


@dataclass(frozen=True)
class LandmarkPairs:
    """Index-aligned pairs: ``fixed[i]`` corresponds to ``moving[i]``."""

    fixed: np.ndarray
    moving: np.ndarray

    def __post_init__(self):
        f = as_points(self.fixed, "fixed landmarks")
        m = as_points(self.moving, "moving landmarks")
        if len(f) != len(m):
            raise PointSetError(f"landmark count mismatch: {len(f)} vs {len(m)}")
        object.__setattr__(self, "fixed", f)
        object.__setattr__(self, "moving", m)

    def __len__(self):
        return len(self.fixed)

    def subset(self, idx):
        return LandmarkPairs(self.fixed[idx], self.moving[idx])

    def as_array(self):
        """``(n, 6)`` rows of fixed xyz followed by moving xyz."""
        return np.hstack([self.fixed, self.moving])


@dataclass(frozen=True)
class Graph:
    """k-nearest-neighbour graph; row ``i`` of ``neighbors`` lists node i's neighbours."""

    k: int
    neighbors: np.ndarray

    def __len__(self):
        return len(self.neighbors)


# -- file I/O -----------------------------------------------------------------

def _parse_csv(lines):
    rows = []
    for lineno, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text:
            continue
        if not rows and text.replace(" ", "").lower() == "x,y,z":
            continue
        fields = text.split(",")
        if len(fields) != 3:
            raise MalformedRow(lineno, text)
        try:
            row = [float(f) for f in fields]
        except ValueError:
            raise MalformedRow(lineno, text) from None
        if not all(math.isfinite(v) for v in row):
            raise NonFiniteValue(lineno)
        rows.append(row)
    return rows


def _parse_ply(lines):
    if not lines or lines[0].strip() != "ply":
        raise MalformedRow(1, lines[0] if lines else "")
    count, props, body_start = None, [], None
    for lineno, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise PointSetError(f"only ASCII PLY is supported, got {parts[1]}")
        elif parts[0] == "element" and parts[1] == "vertex":
            count = int(parts[2])
        elif parts[0] == "property":
            props.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = lineno
            break
    if count is None or body_start is None or props != ["x", "y", "z"]:
        raise PointSetError("PLY header must declare 'element vertex' with float x, y, z only")
    rows = []
    for lineno, raw in enumerate(lines[body_start:body_start + count], start=body_start + 1):
        fields = raw.split()
        if len(fields) != 3:
            raise MalformedRow(lineno, raw.strip())
        try:
            row = [float(f) for f in fields]
        except ValueError:
            raise MalformedRow(lineno, raw.strip()) from None
        if not all(math.isfinite(v) for v in row):
            raise NonFiniteValue(lineno)
        rows.append(row)
    if len(rows) != count:
        raise MalformedRow(body_start + len(rows) + 1, "<missing vertex rows>")
    return rows


def load_pointset(path, format="csv"):
    """Read a point set; raises ``FileNotFoundError``, ``EmptyInput``,
    ``MalformedRow`` or ``NonFiniteValue``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such point-set file: {path}")
    lines = path.read_text().splitlines()
    if format == "csv":
        rows = _parse_csv(lines)
    elif format == "ply":
        rows = _parse_ply(lines)
    else:
        raise ValueError(f"unknown point-set format {format!r}")
    if not rows:
        raise EmptyInput(f"{path} contains no points")
    return np.array(rows, dtype=np.float64)


def save_pointset(points, path, format="csv"):
    points = as_points(points)
    # repr() of a float64 round-trips exactly
    body = "\n".join(" ".join(repr(float(v)) for v in p) for p in points)
    if format == "csv":
        text = "x,y,z\n" + body.replace(" ", ",") + "\n"
    elif format == "ply":
        header = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
                  "property double x", "property double y", "property double z",
                  "end_header"]
        text = "\n".join(header) + "\n" + body + "\n"
    else:
        raise ValueError(f"unknown point-set format {format!r}")
    Path(path).write_text(text)


# -- sampling and neighbourhoods ----------------------------------------------

def farthest_point_sample(points, count, seed=0, first=None):
    """Greedy farthest point sampling.

    The first index is drawn uniformly from a generator seeded with ``seed``
    unless ``first`` forces it. Later picks maximise the distance to the
    already-selected set; ``argmax`` breaks ties by lowest index.
    """
    points = as_points(points)
    n = len(points)
    if not 1 <= count <= n:
        raise ValueError(f"count must be in [1, {n}], got {count}")
    if first is None:
        first = int(np.random.default_rng(seed).integers(n))
    selected = np.empty(count, dtype=np.int64)
    selected[0] = first
    min_d2 = ((points - points[first]) ** 2).sum(axis=1)
    for j in range(1, count):
        nxt = int(np.argmax(min_d2))
        selected[j] = nxt
        np.minimum(min_d2, ((points - points[nxt]) ** 2).sum(axis=1), out=min_d2)
    return selected


def pairwise_sq_dists(a, b):
    """Squared Euclidean distances from explicit coordinate differences."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((len(a), len(b)))
    step = max(1, (1 << 22) // max(1, len(b) * a.shape[1]))
    for s in range(0, len(a), step):
        diff = a[s:s + step, None, :] - b[None, :, :]
        out[s:s + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _smallest_k(d2, k):
    """Column indices of the k smallest entries per row, ordered by (distance, index)."""
    n = d2.shape[1]
    if k >= n:
        return np.argsort(d2, axis=1, kind="stable")
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(d2, part, axis=1).max(axis=1)
    # rows whose boundary distance is shared with an unselected column need a full stable sort
    ambiguous = (d2 <= kth[:, None]).sum(axis=1) > k
    if np.any(ambiguous):
        rows = np.flatnonzero(ambiguous)
        part[rows] = np.argsort(d2[rows], axis=1, kind="stable")[:, :k]
    vals = np.take_along_axis(d2, part, axis=1)
    order = np.lexsort((part, vals), axis=1)
    return np.take_along_axis(part, order, axis=1)


def knn_from_sq_dists(d2, k):
    """kNN graph from a square distance matrix, excluding self."""
    d2 = np.array(d2, dtype=np.float64)
    n = len(d2)
    if n < 2:
        raise ValueError("kNN needs at least 2 points")
    if k < 1:
        raise ValueError("k must be >= 1")
    np.fill_diagonal(d2, np.inf)
    kk = min(k, n - 1)
    return Graph(k=kk, neighbors=_smallest_k(d2, kk))


def knn_indices(points, k):
    """Exact kNN graph: ``min(k, N-1)`` nearest other points, lowest index wins ties."""
    points = np.asarray(points, dtype=np.float64)
    return knn_from_sq_dists(pairwise_sq_dists(points, points), k)


def center_align(fixed, moving):
    """Translate ``moving`` so its centroid coincides with that of ``fixed``."""
    fixed = as_points(fixed, "fixed")
    moving = as_points(moving, "moving")
    shift = fixed.mean(axis=0) - moving.mean(axis=0)
    return moving + shift, shift
