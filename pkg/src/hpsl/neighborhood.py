"""Ball query and kNN search over a uniform grid, with brute-force references.

All distances are compared as squared Euclidean distances with exact
comparison; results per query are ordered by (distance, index).
"""

from __future__ import annotations

import hashlib
import itertools
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .cloud import PointCloud


@dataclass(frozen=True)
class Ball:
    radius: float
    cap: int

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"ball radius must be > 0, got {self.radius}")
        if self.cap < 1:
            raise ValueError(f"ball cap must be >= 1, got {self.cap}")


@dataclass(frozen=True)
class KNN:
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


NeighborhoodSpec = Union[Ball, KNN]


def _as_points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.metric_coords
    a = np.asarray(x, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def _sq_dists(points: np.ndarray, queries: np.ndarray) -> np.ndarray:
    return ((queries[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)


class SpatialIndex:
    """Immutable uniform grid over a point set.

    Points are bucketed by ``floor((x - lo) / cell_size)`` and stored sorted by
    linearized cell key, so every cell is a contiguous run of ``order``.
    """

    def __init__(self, points, cell_size: float):
        if not cell_size > 0 or not math.isfinite(cell_size):
            raise ValueError(f"cell_size must be a positive finite number, got {cell_size}")
        pts = np.array(_as_points(points), dtype=np.float64)
        pts.setflags(write=False)
        self.points = pts
        self.cell_size = float(cell_size)
        self.lo = pts.min(axis=0)
        self.hi = pts.max(axis=0)
        cells = self._cell_of(pts)
        self.dims = cells.max(axis=0) + 1
        total = 1
        for extent in self.dims.tolist():
            total *= int(extent)
        # linear keys need the whole grid to fit in int64
        self._linear = total < 2**62
        if self._linear:
            strides = np.ones(pts.shape[1], dtype=np.int64)
            for a in range(pts.shape[1] - 2, -1, -1):
                strides[a] = strides[a + 1] * self.dims[a + 1]
            self._strides = strides
            keys = cells @ strides
            self.order = np.argsort(keys, kind="stable")
            self._sorted_keys = keys[self.order]
        else:
            uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
            inverse = inverse.reshape(-1)
            self.order = np.argsort(inverse, kind="stable")
            starts = np.searchsorted(inverse[self.order], np.arange(len(uniq)), "left")
            ends = np.searchsorted(inverse[self.order], np.arange(len(uniq)), "right")
            self._cell_runs = {tuple(c): (s, e) for c, s, e in zip(uniq.tolist(), starts, ends)}
        self.order.setflags(write=False)
        self._cells = cells
        sorted_cells = cells[self.order]
        change = np.any(sorted_cells[1:] != sorted_cells[:-1], axis=1)
        self._occ_start = np.concatenate([[0], np.flatnonzero(change) + 1])
        self._occ_end = np.concatenate([self._occ_start[1:], [len(self.order)]])
        self._occ_cells = sorted_cells[self._occ_start]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.lo, self.hi

    @cached_property
    def grid(self) -> dict:
        """Occupied cells mapped to their point indices (ascending)."""
        out: dict = {}
        for i, c in enumerate(map(tuple, self._cells.tolist())):
            out.setdefault(c, []).append(i)
        return out

    def _cell_of(self, x: np.ndarray) -> np.ndarray:
        return np.floor((x - self.lo) / self.cell_size).astype(np.int64)

    def _query_cells(self, queries: np.ndarray) -> np.ndarray:
        rel = np.floor((queries - self.lo) / self.cell_size)
        # far-away queries only need to stay outside the grid
        rel = np.clip(rel, -(2**40), 2**40)
        return rel.astype(np.int64)

    def _runs(self, cells: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Start/end positions in ``order`` for each cell in ``cells`` (..., d)."""
        inside = np.all((cells >= 0) & (cells < self.dims), axis=-1)
        if self._linear:
            keys = np.where(inside, cells @ self._strides, -1)
            start = np.searchsorted(self._sorted_keys, keys, "left")
            end = np.searchsorted(self._sorted_keys, keys, "right")
            end = np.where(inside, end, start)
            return start, end
        flat = cells.reshape(-1, cells.shape[-1])
        start = np.zeros(len(flat), dtype=np.int64)
        end = np.zeros(len(flat), dtype=np.int64)
        for i, c in enumerate(map(tuple, flat.tolist())):
            run = self._cell_runs.get(c)
            if run is not None:
                start[i], end[i] = run
        return start.reshape(cells.shape[:-1]), end.reshape(cells.shape[:-1])

    def candidates(self, queries: np.ndarray, qcells: np.ndarray, ring: int):
        """All (query id, point id, squared distance) triples for points in
        cells within Chebyshev distance ``ring`` of each query's cell."""
        d = self.points.shape[1]
        if (2 * ring + 1) ** d <= len(self._occ_cells):
            offs = _offsets(d, ring)
            start, end = self._runs(qcells[:, None, :] + offs[None, :, :])
            start, end = start.reshape(-1), end.reshape(-1)
            pair_q = np.repeat(np.arange(len(qcells), dtype=np.int64), offs.shape[0])
        else:
            # sparse grid: scan the occupied cells instead of the dense block
            pair_q, pair_c = [], []
            step = max(1, 2**22 // max(1, len(self._occ_cells) * d))
            for lo in range(0, len(qcells), step):
                qc = qcells[lo : lo + step]
                near = np.all(np.abs(self._occ_cells[None, :, :] - qc[:, None, :]) <= ring, axis=2)
                qi, ci = np.nonzero(near)
                pair_q.append(qi + lo)
                pair_c.append(ci)
            pair_q = np.concatenate(pair_q)
            pair_c = np.concatenate(pair_c)
            start, end = self._occ_start[pair_c], self._occ_end[pair_c]
        counts = end - start
        total = int(counts.sum())
        qid = np.repeat(pair_q, counts)
        first = np.repeat(start, counts)
        within = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
        pid = self.order[first + within]
        d2 = ((self.points[pid] - queries[qid]) ** 2).sum(axis=1)
        return qid, pid, d2


_OFFSET_CACHE: dict = {}


def _offsets(d: int, ring: int) -> np.ndarray:
    key = (d, ring)
    if key not in _OFFSET_CACHE:
        rng = range(-ring, ring + 1)
        _OFFSET_CACHE[key] = np.array(list(itertools.product(rng, repeat=d)), dtype=np.int64).reshape(-1, d)
    return _OFFSET_CACHE[key]


def build_index(cloud, cell_size: float) -> SpatialIndex:
    return SpatialIndex(cloud, cell_size)


def _take_first_per_group(qid, pid, d2, n_queries: int, limit: int, trim: bool = False):
    """Sort triples by (query, d2, index) and keep ``limit`` per query.

    With ``trim`` the output has only as many columns as the fullest query
    needs, so a huge ``limit`` costs nothing.
    """
    if trim:
        limit = max(1, min(limit, int(np.bincount(qid, minlength=1).max()) if len(qid) else 1))
    order = np.lexsort((pid, d2, qid))
    qid, pid, d2 = qid[order], pid[order], d2[order]
    group_start = np.searchsorted(qid, np.arange(n_queries), "left")
    rank = np.arange(len(qid)) - group_start[qid]
    keep = rank < limit
    qid, pid, d2, rank = qid[keep], pid[keep], d2[keep], rank[keep]
    idx = np.full((n_queries, limit), -1, dtype=np.int64)
    dist2 = np.full((n_queries, limit), np.inf)
    idx[qid, rank] = pid
    dist2[qid, rank] = d2
    counts = np.bincount(qid, minlength=n_queries)
    return idx, dist2, counts


def _unpad(idx: np.ndarray, counts: np.ndarray) -> List[np.ndarray]:
    return [idx[i, : counts[i]].copy() for i in range(len(counts))]


def ball_query_padded(index: SpatialIndex, centroids, r: float, cap: int):
    """Ball query returning a (Q, <= cap) index array padded with -1, the
    matching squared distances, and per-query member counts."""
    if not r > 0:
        raise ValueError(f"radius must be > 0, got {r}")
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    q = _as_points(centroids)
    ring = max(1, math.ceil(r / index.cell_size))
    qid, pid, d2 = index.candidates(q, index._query_cells(q), ring)
    inside = d2 <= r * r
    return _take_first_per_group(qid[inside], pid[inside], d2[inside], len(q), cap, trim=True)


def ball_query(index: SpatialIndex, centroids, r: float, K: int) -> List[np.ndarray]:
    """Indices within distance ``r`` of each centroid, K nearest kept,
    ordered by (distance, index). Empty lists are legal."""
    idx, _, counts = ball_query_padded(index, centroids, r, K)
    return _unpad(idx, counts)


def knn_query_padded(index: SpatialIndex, centroids, k: int):
    n = index.n
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    q = _as_points(centroids)
    nq = len(q)
    idx = np.empty((nq, k), dtype=np.int64)
    dist2 = np.empty((nq, k))
    qcells = index._query_cells(q)
    outside = np.any((qcells < 0) | (qcells >= index.dims), axis=1)
    pending = np.flatnonzero(~outside)
    if outside.any():
        far = np.flatnonzero(outside)
        fi, fd, _ = _brute_knn(index.points, q[far], k)
        idx[far], dist2[far] = fi, fd
    # start with a ring that is expected to hold about k points
    per_cell = n / len(index._occ_cells)
    d = index.points.shape[1]
    ring = max(1, math.ceil((((k / per_cell) ** (1.0 / d)) - 1) / 2))
    while len(pending):
        qc = qcells[pending]
        qid, pid, d2 = index.candidates(q[pending], qc, ring)
        got_i, got_d, counts = _take_first_per_group(qid, pid, d2, len(pending), k)
        covers_all = np.all((qc - ring <= 0) & (qc + ring >= index.dims - 1), axis=1)
        # a point outside the searched block is farther than ring * cell_size
        bound = (ring * index.cell_size) ** 2 * (1 - 1e-9)
        done = (counts >= k) & ((got_d[:, -1] < bound) | covers_all)
        idx[pending[done]] = got_i[done]
        dist2[pending[done]] = got_d[done]
        pending = pending[~done]
        ring = min(ring * 2, int(index.dims.max()))
    return idx, dist2


def knn_query(index: SpatialIndex, centroids, k: int) -> List[np.ndarray]:
    """The k nearest point indices per centroid, ordered by (distance, index)."""
    idx, _ = knn_query_padded(index, centroids, k)
    return list(idx)


def _brute_knn(points: np.ndarray, queries: np.ndarray, k: int):
    d2 = _sq_dists(points, queries)
    n = points.shape[0]
    ids = np.broadcast_to(np.arange(n), d2.shape)
    order = np.lexsort((ids, d2), axis=1)[:, :k]
    return order, np.take_along_axis(d2, order, axis=1), None


def brute_ball_query(points, centroids, r: float, K: int) -> List[np.ndarray]:
    """O(N*M) reference for :func:`ball_query`."""
    pts, q = _as_points(points), _as_points(centroids)
    d2 = _sq_dists(pts, q)
    out = []
    for row in d2:
        members = np.flatnonzero(row <= r * r)
        order = np.lexsort((members, row[members]))
        out.append(members[order][:K])
    return out


def brute_knn_query(points, centroids, k: int) -> List[np.ndarray]:
    """O(N*M) reference for :func:`knn_query`."""
    pts, q = _as_points(points), _as_points(centroids)
    if not 1 <= k <= len(pts):
        raise ValueError(f"k={k} must be in [1, {len(pts)}]")
    idx, _, _ = _brute_knn(pts, q, k)
    return list(idx)


def default_cell_size(points, spec: NeighborhoodSpec) -> float:
    pts = _as_points(points)
    if isinstance(spec, Ball):
        return spec.radius
    extent = float(np.max(pts.max(axis=0) - pts.min(axis=0)))
    if extent <= 0:
        return 1.0
    d = pts.shape[1]
    # aim for a few points per cell under a uniform assumption
    return extent * (4.0 / len(pts)) ** (1.0 / d)


def query(points, centroids, spec: NeighborhoodSpec, method: str = "grid", index: Optional[SpatialIndex] = None):
    """Padded neighborhood query: returns (Q, K) indices (-1 padded),
    squared distances and member counts. ``method`` is ``grid`` or ``brute``."""
    pts, q = _as_points(points), _as_points(centroids)
    if method == "brute":
        if isinstance(spec, Ball):
            d2 = _sq_dists(pts, q)
            qid, pid = np.nonzero(d2 <= spec.radius * spec.radius)
            return _take_first_per_group(qid, pid, d2[qid, pid], len(q), spec.cap, trim=True)
        if not 1 <= spec.k <= len(pts):
            raise ValueError(f"k={spec.k} must be in [1, {len(pts)}]")
        idx, dist2, _ = _brute_knn(pts, q, spec.k)
        return idx, dist2, np.full(len(q), spec.k)
    if method != "grid":
        raise ValueError(f"unknown query method {method!r}")
    if index is None:
        index = SpatialIndex(pts, default_cell_size(pts, spec))
    if isinstance(spec, Ball):
        return ball_query_padded(index, q, spec.radius, spec.cap)
    idx, dist2 = knn_query_padded(index, q, spec.k)
    return idx, dist2, np.full(len(q), spec.k)


# -- benchmarking ------------------------------------------------------------

@dataclass(frozen=True)
class Workload:
    n: int
    density: str = "uniform"
    kind: str = "ball"
    param: float = 0.2
    cap: int = 64
    repetitions: int = 5
    n_queries: int = 256
    seed: int = 0
    threads: int = 1
    dim: int = 3


def workload_points(n: int, density: str, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Sample ``n`` points in the unit ball, uniformly or with radial falloff."""
    direction = rng.normal(size=(n, dim))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
    if density == "uniform":
        radius = rng.random(n) ** (1.0 / dim)
    elif density == "radial":
        # density decays away from the origin like a single-viewpoint scan
        radius = rng.random(n) ** 2
    else:
        raise ValueError(f"unknown density profile {density!r}")
    return direction * radius[:, None]


def result_hash(lists: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for row in lists:
        h.update(np.asarray(row, dtype="<i8").tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


def _run_chunked(fn, queries: np.ndarray, threads: int) -> List[np.ndarray]:
    if threads <= 1 or len(queries) < 2:
        return fn(queries)
    chunks = np.array_split(queries, min(threads, len(queries)))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(fn, chunks))
    return [row for part in parts for row in part]


def bench_queries(workload: Workload) -> List[dict]:
    """Time brute-force and grid queries on one workload.

    The first repetition is a warm-up and excluded from the statistics.
    Each row carries a hash of the result lists so equality is checked.
    """
    rng = np.random.default_rng(workload.seed)
    pts = workload_points(workload.n, workload.density, workload.dim, rng)
    nq = min(workload.n_queries, workload.n)
    queries = pts[np.sort(rng.choice(workload.n, nq, replace=False))]
    if workload.kind == "ball":
        spec: NeighborhoodSpec = Ball(float(workload.param), workload.cap)
    elif workload.kind == "knn":
        spec = KNN(min(int(workload.param), workload.n))
    else:
        raise ValueError(f"unknown query kind {workload.kind!r}")

    def brute(qs):
        if isinstance(spec, Ball):
            return brute_ball_query(pts, qs, spec.radius, spec.cap)
        return brute_knn_query(pts, qs, spec.k)

    def grid(qs):
        index = SpatialIndex(pts, default_cell_size(pts, spec))
        if isinstance(spec, Ball):
            return ball_query(index, qs, spec.radius, spec.cap)
        return knn_query(index, qs, spec.k)

    reps = max(2, workload.repetitions)
    rows = []
    for name, fn in (("brute", brute), ("grid", grid)):
        times = []
        result = None
        for _ in range(reps):
            t0 = time.perf_counter()
            result = _run_chunked(fn, queries, workload.threads)
            times.append((time.perf_counter() - t0) * 1e6)
        timed = np.array(times[1:])
        rows.append(
            dict(
                method=name,
                kind=workload.kind,
                param=workload.param,
                N=workload.n,
                density=workload.density,
                median_us=float(np.median(timed)),
                p95_us=float(np.percentile(timed, 95)),
                result_hash=result_hash(result),
            )
        )
    return rows


BENCH_COLUMNS = ["method", "kind", "param", "N", "density", "median_us", "p95_us", "result_hash"]


def bench_csv(rows: Sequence[dict]) -> str:
    lines = [",".join(BENCH_COLUMNS)]
    for row in rows:
        vals = []
        for col in BENCH_COLUMNS:
            v = row[col]
            vals.append(f"{v:.1f}" if col.endswith("_us") else str(v))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"
