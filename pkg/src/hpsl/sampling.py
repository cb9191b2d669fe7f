"""Iterative farthest point sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud


@dataclass(frozen=True, eq=False)
class SampleResult:
    indices: np.ndarray
    min_dists: np.ndarray


def _coords(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.metric_coords
    x = np.asarray(cloud, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def farthest_point_sample(cloud, m: int, start: int = 0) -> SampleResult:
    """Greedy farthest point sampling of ``m`` indices beginning at ``start``.

    Each step picks the point whose distance to the already selected set is
    largest; ties go to the lowest index. Squared distances are compared so
    the selection is exact and reproducible. Runs in O(N*m).
    """
    x = _coords(cloud)
    n = x.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"sample count m={m} must be in [1, {n}]")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range for {n} points")
    indices = np.empty(m, dtype=np.int64)
    indices[0] = start
    best = ((x - x[start]) ** 2).sum(axis=1)
    # selected points are parked at -1 so duplicates of them stay eligible
    best[start] = -1.0
    for j in range(1, m):
        nxt = int(np.argmax(best))
        indices[j] = nxt
        np.minimum(best, ((x - x[nxt]) ** 2).sum(axis=1), out=best)
        best[nxt] = -1.0
    best[indices] = 0.0
    return SampleResult(indices, np.sqrt(best))


def fps_covering_radius(result: SampleResult) -> float:
    """Largest distance from any point to its nearest selected point."""
    return float(result.min_dists.max())


def covering_radius(cloud, indices) -> float:
    """Covering radius of an arbitrary index subset (brute force)."""
    x = _coords(cloud)
    sel = x[np.asarray(indices, dtype=np.int64)]
    d2 = ((x[:, None, :] - sel[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1).max()))
