"""Point-set geometry: cloud container, farthest point sampling, k-nearest
neighbors, synthetic shapes, and the text file format.

All tie-breaks are deterministic so the sampling/grouping operators behave
as set functions: candidates at equal distance are ordered lexicographically
by (x, y, z). Distances compare as squared euclidean throughout.

Text format (one point per line, `#` starts a comment):

    x y z f1 ... fC [label]

Files written here carry `# features: C` and `# labels: 0|1` directives.
Files without directives are parsed with a documented inference rule: the
trailing column is a label iff every value in it is a nonnegative integer
below 4096.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (FileFormatError, InputError, ParseError, RangeError)
from .rng import SplitMix64

SYNTHETIC_KINDS = ("sphere", "cube", "torus", "two_planes")
CLASS_IDS = {"sphere": 0, "cube": 1, "torus": 2}
_LABEL_INFER_BOUND = 4096


class PointCloud:
    """Positions (N,3), features (N,C), optional integer labels (N,)."""

    __slots__ = ("positions", "features", "labels")

    def __init__(self, positions, features, labels=None):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64)
        self.features = np.ascontiguousarray(features, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise InputError(f"positions must be (N,3), got {self.positions.shape}")
        n = self.positions.shape[0]
        if n < 1:
            raise InputError("a point cloud needs at least one point")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise InputError(
                f"features must be (N,C) with N={n}, got {self.features.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise InputError("non-finite coordinates")
        if not np.all(np.isfinite(self.features)):
            raise InputError("non-finite features")
        if labels is None:
            self.labels = None
        else:
            lab = np.asarray(labels)
            if lab.shape != (n,):
                raise InputError(f"labels must be length {n}, got shape {lab.shape}")
            if not np.all(lab == np.floor(lab)):
                raise InputError("labels must be integers")
            lab = lab.astype(np.int64)
            if lab.min() < 0:
                raise InputError("labels must be nonnegative")
            self.labels = lab

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_width(self) -> int:
        return self.features.shape[1]

    def permuted(self, perm) -> "PointCloud":
        perm = np.asarray(perm, dtype=np.int64)
        labels = None if self.labels is None else self.labels[perm]
        return PointCloud(self.positions[perm], self.features[perm], labels)

    def subset(self, indices) -> "PointCloud":
        return self.permuted(indices)


@dataclass(frozen=True)
class PivotSet:
    """FPS-selected indices into a parent cloud, in selection order."""

    indices: np.ndarray
    sampling_ratio: float
    source_size: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", idx)
        if idx.ndim != 1:
            raise InputError(f"pivot indices must be 1-D, got shape {idx.shape}")
        if len(np.unique(idx)) != idx.size:
            raise InputError("pivot indices must be unique")
        if idx.size and (idx.min() < 0 or idx.max() >= self.source_size):
            raise RangeError(
                f"pivot index out of range [0, {self.source_size})")
        expected = expected_pivot_count(self.sampling_ratio, self.source_size)
        if idx.size != expected:
            raise InputError(
                f"pivot count {idx.size} inconsistent with SR={self.sampling_ratio} "
                f"over N={self.source_size} (expected {expected})")

    @property
    def m(self) -> int:
        return self.indices.size


@dataclass(frozen=True)
class NeighborIndex:
    """Per-point neighbor table (N,k); row i holds the k nearest points to i
    (itself included, listed first among exact-duplicate ties), sorted by
    ascending distance then lexicographic coordinates."""

    table: np.ndarray
    k: int

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.int64)
        object.__setattr__(self, "table", table)
        if table.ndim != 2 or table.shape[1] != self.k:
            raise InputError(f"neighbor table must be (N,{self.k}), got {table.shape}")
        n = table.shape[0]
        if table.size and (table.min() < 0 or table.max() >= n):
            raise RangeError(f"neighbor index out of range [0, {n})")
        rows = np.arange(n)
        if not (table == rows[:, None]).any(axis=1).all():
            raise InputError("every neighbor row must contain its own point")

    @property
    def n(self) -> int:
        return self.table.shape[0]


def expected_pivot_count(sr: float, n: int) -> int:
    """round-half-up of SR*N, floored at 1 for SR > 0; 0 for SR == 0."""
    if sr == 0:
        return 0
    return max(1, int(np.floor(sr * n + 0.5)))


def _lex_smallest(positions: np.ndarray, candidates: np.ndarray) -> int:
    sub = positions[candidates]
    order = np.lexsort((sub[:, 2], sub[:, 1], sub[:, 0]))
    return int(candidates[order[0]])


def _argmax_tiebreak(values: np.ndarray, positions: np.ndarray) -> int:
    best = values.max()
    candidates = np.flatnonzero(values == best)
    if candidates.size == 1:
        return int(candidates[0])
    return _lex_smallest(positions, candidates)


def fps_indices(positions: np.ndarray, m: int) -> np.ndarray:
    """Greedy max-min farthest point sampling over squared distances.

    Seed = point farthest from the centroid; every tie (seed or greedy step)
    breaks to the lexicographically smallest coordinates.
    """
    n = positions.shape[0]
    if m <= 0:
        return np.zeros(0, dtype=np.int64)
    if m > n:
        raise RangeError(f"cannot sample {m} pivots from {n} points")
    centroid = positions.mean(axis=0)
    d_centroid = ((positions - centroid) ** 2).sum(axis=1)
    selected = np.empty(m, dtype=np.int64)
    selected[0] = _argmax_tiebreak(d_centroid, positions)
    min_d = ((positions - positions[selected[0]]) ** 2).sum(axis=1)
    for i in range(1, m):
        nxt = _argmax_tiebreak(min_d, positions)
        selected[i] = nxt
        cand = ((positions - positions[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d, cand, out=min_d)
    return selected


def farthest_point_sample(cloud: PointCloud, sr: float) -> PivotSet:
    if not 0.0 <= sr <= 1.0:
        raise RangeError(f"sampling ratio must lie in [0, 1], got {sr}")
    m = expected_pivot_count(sr, cloud.n)
    return PivotSet(fps_indices(cloud.positions, m), sr, cloud.n)


def knn(cloud: PointCloud, k: int) -> NeighborIndex:
    """Rows sorted by squared distance, ties lexicographic by coordinates;
    the query point itself is forced first among zero-distance duplicates."""
    n = cloud.n
    if not 1 <= k <= n:
        raise RangeError(f"k must lie in [1, {n}], got {k}")
    p = cloud.positions
    diff = p[:, None, :] - p[None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    # self-distance below any real distance: keeps self-inclusion even when
    # another point sits at identical coordinates
    np.fill_diagonal(d2, -1.0)
    keys = (np.broadcast_to(p[:, 2], (n, n)),
            np.broadcast_to(p[:, 1], (n, n)),
            np.broadcast_to(p[:, 0], (n, n)),
            d2)
    order = np.lexsort(keys, axis=-1)
    return NeighborIndex(np.ascontiguousarray(order[:, :k]), k)


def pooling_neighbors(cloud: PointCloud, centers: np.ndarray, k: int) -> np.ndarray:
    """(M,k) indices of the k nearest cloud points to each center row."""
    n = cloud.n
    if not 1 <= k <= n:
        raise RangeError(f"k must lie in [1, {n}], got {k}")
    p = cloud.positions
    diff = centers[:, None, :] - p[None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    m = centers.shape[0]
    keys = (np.broadcast_to(p[:, 2], (m, n)),
            np.broadcast_to(p[:, 1], (m, n)),
            np.broadcast_to(p[:, 0], (m, n)),
            d2)
    order = np.lexsort(keys, axis=-1)
    return np.ascontiguousarray(order[:, :k])


# ---------------------------------------------------------------------------
# synthetic shapes


def _sphere(n: int, stream: SplitMix64):
    z = stream.uniform(n, -1.0, 1.0)
    phi = stream.uniform(n, 0.0, 2.0 * np.pi)
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    pos = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return pos, pos.copy()


def _cube(n: int, stream: SplitMix64):
    face = stream.integers(n, 6)
    a = stream.uniform(n, -1.0, 1.0)
    b = stream.uniform(n, -1.0, 1.0)
    pos = np.zeros((n, 3))
    normal = np.zeros((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    others = np.array([[1, 2], [0, 2], [0, 1]])
    rows = np.arange(n)
    pos[rows, axis] = sign
    pos[rows, others[axis, 0]] = a
    pos[rows, others[axis, 1]] = b
    normal[rows, axis] = sign
    return pos, normal


def _torus(n: int, stream: SplitMix64, major: float = 1.0, minor: float = 0.35):
    u = stream.uniform(n, 0.0, 2.0 * np.pi)
    v = stream.uniform(n, 0.0, 2.0 * np.pi)
    ring = major + minor * np.cos(v)
    pos = np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)
    normal = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    return pos, normal


def _two_planes(n: int, stream: SplitMix64, gap: float = 2.0):
    n0 = n // 2
    a = stream.uniform(n, -1.0, 1.0)
    b = stream.uniform(n, -1.0, 1.0)
    z = np.where(np.arange(n) < n0, 0.0, gap)
    pos = np.stack([a, b, z], axis=1)
    normal = np.tile([0.0, 0.0, 1.0], (n, 1))
    labels = (np.arange(n) >= n0).astype(np.int64)
    return pos, normal, labels


def generate_synthetic(kind: str, n: int, seed: int) -> PointCloud:
    """Seeded surface sampling; features = coordinates + unit normal (C=6).

    Classification kinds (sphere/cube/torus) carry their class id in every
    label slot; two_planes labels each point with its plane.
    """
    if kind not in SYNTHETIC_KINDS:
        raise InputError(
            f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    if n < 8:
        raise InputError(f"synthetic clouds need n >= 8, got {n}")
    stream = SplitMix64(seed).derive(f"synthetic/{kind}")
    if kind == "sphere":
        pos, normal = _sphere(n, stream)
        labels = np.full(n, CLASS_IDS[kind], dtype=np.int64)
    elif kind == "cube":
        pos, normal = _cube(n, stream)
        labels = np.full(n, CLASS_IDS[kind], dtype=np.int64)
    elif kind == "torus":
        pos, normal = _torus(n, stream)
        labels = np.full(n, CLASS_IDS[kind], dtype=np.int64)
    else:
        pos, normal, labels = _two_planes(n, stream)
    features = np.concatenate([pos, normal], axis=1)
    return PointCloud(pos, features, labels)


def cloud_class(cloud: PointCloud) -> int:
    """Cloud-level class of a classification sample (all labels equal)."""
    if cloud.labels is None:
        raise InputError("cloud carries no labels")
    first = int(cloud.labels[0])
    if not np.all(cloud.labels == first):
        raise InputError("cloud labels are not a single cloud-level class")
    return first


# ---------------------------------------------------------------------------
# text file format


def format_cloud(cloud: PointCloud) -> str:
    has_labels = cloud.labels is not None
    lines = []
    # plain data lines suffice whenever the inference rule reads them back
    # correctly; otherwise one directive comment disambiguates
    if has_labels and cloud.labels.max() >= _LABEL_INFER_BOUND:
        lines.append("# labels: 1")
    elif (not has_labels and cloud.feature_width >= 1
          and _infer_label_column(cloud.features)):
        lines.append("# labels: 0")
    for i in range(cloud.n):
        cols = [format(v, ".17g") for v in cloud.positions[i]]
        cols += [format(v, ".17g") for v in cloud.features[i]]
        if has_labels:
            cols.append(str(int(cloud.labels[i])))
        lines.append(" ".join(cols))
    return "\n".join(lines) + "\n"


def save_cloud(cloud: PointCloud, path) -> None:
    from .ioutil import atomic_write_text
    atomic_write_text(path, format_cloud(cloud))


def _infer_label_column(rows: np.ndarray) -> bool:
    last = rows[:, -1]
    return bool(np.all(last == np.floor(last))
                and last.min() >= 0 and last.max() < _LABEL_INFER_BOUND)


def parse_cloud(text: str, name: str = "<string>") -> PointCloud:
    feature_width: Optional[int] = None
    has_labels: Optional[bool] = None
    rows = []
    ncols = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("features:"):
                feature_width = int(body.split(":", 1)[1])
            elif body.startswith("labels:"):
                has_labels = bool(int(body.split(":", 1)[1]))
            continue
        cols = line.split()
        if ncols is None:
            ncols = len(cols)
            if ncols < 3:
                raise FileFormatError(
                    f"{name}: line {lineno}: need at least 3 columns, got {ncols}")
        elif len(cols) != ncols:
            raise FileFormatError(
                f"{name}: line {lineno}: expected {ncols} columns, got {len(cols)}")
        try:
            rows.append([float(c) for c in cols])
        except ValueError as exc:
            raise ParseError(f"{name}: line {lineno}: {exc}") from None
    if not rows:
        raise FileFormatError(f"{name}: no data lines")
    data = np.asarray(rows)
    if has_labels is None:
        has_labels = data.shape[1] > 3 and _infer_label_column(data)
    n_extra = data.shape[1] - 3 - (1 if has_labels else 0)
    if feature_width is not None and feature_width != n_extra:
        raise FileFormatError(
            f"{name}: directive says {feature_width} features but rows carry {n_extra}")
    if n_extra < 0:
        raise FileFormatError(f"{name}: label column declared but only 3 columns present")
    positions = data[:, :3]
    features = data[:, 3:3 + n_extra]
    labels = data[:, -1] if has_labels else None
    if labels is not None and not np.all(labels == np.floor(labels)):
        raise FileFormatError(f"{name}: label column contains non-integers")
    return PointCloud(positions, features, labels)


def load_cloud(path) -> PointCloud:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_cloud(fh.read(), name=os.fspath(path))
