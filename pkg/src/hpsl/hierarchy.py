"""Set abstraction (single/multi-scale, multi-resolution) and feature propagation.

The geometric part of every level (centroid sampling, grouping, interpolation
weights) depends only on coordinates, so it is computed up front as index
arrays. The learned part then runs on gathered rows: each region member is one
row through a shared MLP, followed by a max over the region.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .cloud import PointCloud
from .engine import MLP, masked_set_max, masked_set_max_backward
from .neighborhood import KNN, Ball, NeighborhoodSpec, query
from .sampling import farthest_point_sample


class ConfigurationError(ValueError):
    """Raised when parameter shapes or blueprint widths do not line up."""


class Combine(enum.Enum):
    SINGLE_SCALE = "single"
    MULTI_SCALE = "multi"


@dataclass(frozen=True)
class Scale:
    radius: float
    cap: int
    widths: Tuple[int, ...]

    @property
    def neighborhood(self) -> Ball:
        return Ball(self.radius, self.cap)


@dataclass(frozen=True)
class SetAbstractionSpec:
    num_centroids: int
    scales: Tuple[Scale, ...]
    combine: Combine = Combine.SINGLE_SCALE

    def __post_init__(self):
        if not self.scales:
            raise ConfigurationError("set abstraction needs at least one scale")
        if self.combine is Combine.MULTI_SCALE:
            radii = [s.radius for s in self.scales]
            if len(radii) < 2 or len(set(radii)) != len(radii):
                raise ConfigurationError("multi-scale grouping needs >= 2 scales with distinct radii")
        elif len(self.scales) != 1:
            raise ConfigurationError("single-scale grouping takes exactly one scale")


@dataclass(frozen=True)
class MultiResolutionSpec:
    """Region features from lower-level sub-regions plus raw points."""

    num_centroids: int
    lower: Scale
    raw: Scale


@dataclass(frozen=True)
class FeaturePropagationSpec:
    widths: Tuple[int, ...]
    interp_k: int = 3
    interp_power: float = 2.0

    def __post_init__(self):
        if not self.widths:
            raise ConfigurationError("feature propagation needs at least one width")
        if self.interp_k < 1 or not self.interp_power > 0:
            raise ConfigurationError("interpolation needs k >= 1 and power > 0")


@dataclass(frozen=True, eq=False)
class GroupedRegions:
    regions: np.ndarray  # (M, K, d + C): localized coords then features
    mask: np.ndarray  # (M, K)
    centroid_indices: np.ndarray  # (M,)
    centroid_coords: np.ndarray  # (M, d)


# -- grouping -------------------------------------------------------------------

def _auto_method(n_points: int, n_queries: int) -> str:
    return "brute" if n_points * n_queries <= 300_000 else "grid"


def neighbor_indices(
    points: np.ndarray,
    centers: np.ndarray,
    spec: NeighborhoodSpec,
    self_idx: Optional[np.ndarray] = None,
    method: str = "auto",
) -> Tuple[np.ndarray, np.ndarray]:
    """Fixed-width neighbor table for each center.

    Returns ``(idx, mask)`` of shape (M, K). Under-full rows are padded by
    repeating the nearest member, with the mask marking pads invalid. An empty
    ball falls back to the center itself (``self_idx``) or its nearest point.
    """
    n = len(points)
    if method == "auto":
        method = _auto_method(n, len(centers))
    if isinstance(spec, KNN):
        width = spec.k
        spec = KNN(min(spec.k, n))
    else:
        width = spec.cap
    idx, _, counts = query(points, centers, spec, method=method)
    counts = counts.copy()
    if idx.shape[1] < width:
        idx = np.hstack([idx, np.full((len(idx), width - idx.shape[1]), -1, dtype=np.int64)])
    empty = counts == 0
    if empty.any():
        if self_idx is not None:
            idx[empty, 0] = np.asarray(self_idx)[empty]
        else:
            nearest, _, _ = query(points, centers[empty], KNN(1), method="brute")
            idx[empty, 0] = nearest[:, 0]
        counts[empty] = 1
    mask = np.arange(width)[None, :] < counts[:, None]
    idx = np.where(mask, idx, idx[:, :1])
    return idx, mask


def group_and_localize(
    cloud: PointCloud,
    centroid_indices,
    spec: NeighborhoodSpec,
    K: Optional[int] = None,
    method: str = "auto",
) -> GroupedRegions:
    """Gather each centroid's neighborhood and express coordinates relative to
    the centroid. ``K`` overrides the cap of a ball spec."""
    cidx = np.asarray(centroid_indices, dtype=np.int64)
    if K is not None:
        spec = Ball(spec.radius, K) if isinstance(spec, Ball) else KNN(K)
    x, f = cloud.metric_coords, cloud.features
    centers = x[cidx]
    idx, mask = neighbor_indices(x, centers, spec, self_idx=cidx, method=method)
    local = x[idx] - centers[:, None, :]
    regions = np.concatenate([local, f[idx]], axis=2)
    return GroupedRegions(regions, mask, cidx, centers)


# -- batched encoders -------------------------------------------------------------

@dataclass(eq=False)
class Grouping:
    """Batched regions as flat indices into the level input rows."""

    gidx: np.ndarray  # (B, M, K)
    mask: np.ndarray  # (B, M, K)
    local: np.ndarray  # (B, M, K, d)

    def __post_init__(self):
        self.vflat = np.flatnonzero(self.mask.reshape(-1))
        self.vsrc = self.gidx.reshape(-1)[self.vflat]
        self.vlocal = self.local.reshape(-1, self.local.shape[-1])[self.vflat]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.gidx.shape


def stack_groupings(
    tables: Sequence[Tuple[np.ndarray, np.ndarray]],
    offsets: np.ndarray,
    coords: np.ndarray,
    centers: np.ndarray,
) -> Grouping:
    """Stack per-cloud (idx, mask) tables, padding K to the widest table.

    ``coords`` are the flat input coordinates, ``centers`` (B, M, d).
    """
    b = len(tables)
    m = tables[0][0].shape[0]
    k = max(t[0].shape[1] for t in tables)
    gidx = np.empty((b, m, k), dtype=np.int64)
    mask = np.zeros((b, m, k), dtype=bool)
    for j, (idx, msk) in enumerate(tables):
        kj = idx.shape[1]
        gidx[j, :, :kj] = idx + offsets[j]
        gidx[j, :, kj:] = idx[:, :1] + offsets[j]
        mask[j, :, :kj] = msk
    local = coords[gidx] - centers[:, :, None, :]
    return Grouping(gidx, mask, local)


class GroupEncoder:
    """Shared per-point MLP followed by a masked max over each region."""

    def __init__(self, mlp: MLP, use_coords: bool):
        self.mlp = mlp
        self.use_coords = use_coords

    def forward(self, feats: np.ndarray, g: Grouping, train: bool, rng=None):
        b, m, k = g.shape
        x = feats[g.vsrc]
        if self.use_coords:
            x = np.hstack([g.vlocal, x])
        if x.shape[1] != self.mlp.in_width:
            raise ConfigurationError(f"encoder expects input width {self.mlp.in_width}, got {x.shape[1]}")
        h, caches = self.mlp.forward(x, train, rng)
        c_out = h.shape[1]
        full = np.full((b * m * k, c_out), -np.inf)
        full[g.vflat] = h
        out, arg = masked_set_max(full.reshape(b, m, k, c_out), g.mask)
        return out.reshape(b * m, c_out), (caches, arg, feats.shape)

    def backward(self, dout: np.ndarray, g: Grouping, cache, need_input: bool = True):
        caches, arg, in_shape = cache
        b, m, k = g.shape
        c_out = dout.shape[1]
        dfull = masked_set_max_backward(dout.reshape(b, m, c_out), arg, k)
        dh = dfull.reshape(-1, c_out)[g.vflat]
        dx = self.mlp.backward(dh, caches, need_dx=need_input)
        if not need_input:
            return None
        dfeats = np.zeros(in_shape)
        skip = g.vlocal.shape[1] if self.use_coords else 0
        np.add.at(dfeats, g.vsrc, dx[:, skip:])
        return dfeats


# -- single-cloud level API ---------------------------------------------------------

def _regions_grouping(regions: GroupedRegions, d: int):
    """Express a single GroupedRegions as a batched grouping over its own rows."""
    m, k, width = regions.regions.shape
    rows = regions.regions.reshape(m * k, width)
    gidx = np.arange(m * k).reshape(1, m, k)
    g = Grouping(gidx, regions.mask[None], regions.regions[None, :, :, :d])
    return g, rows[:, d:]


def pointnet_forward(regions: GroupedRegions, params: MLP, train: bool = False, rng=None, use_coords: bool = True):
    """Shared MLP over every valid region member, then max over members.

    Returns ``(features (M, C'), cache)``; padded members are never read.
    """
    d = regions.centroid_coords.shape[1]
    g, feats = _regions_grouping(regions, d)
    enc = GroupEncoder(params, use_coords)
    out, cache = enc.forward(feats, g, train, rng)
    return out, (enc, g, cache)


def pointnet_backward(dout: np.ndarray, cache) -> np.ndarray:
    """Gradient w.r.t. the feature columns of the regions, shape (M, K, C)."""
    enc, g, inner = cache
    dfeats = enc.backward(dout, g, inner, need_input=True)
    _, m, k = g.shape
    return dfeats.reshape(m, k, -1)


def _sa_encode(cloud: PointCloud, spec: SetAbstractionSpec, params: Sequence[MLP], train, start, use_coords, rng):
    if len(params) != len(spec.scales):
        raise ConfigurationError(f"{len(spec.scales)} scales but {len(params)} parameter sets")
    m = min(spec.num_centroids, cloud.n)
    if spec.num_centroids > cloud.n:
        raise ConfigurationError(f"{spec.num_centroids} centroids requested from {cloud.n} points")
    centroids = farthest_point_sample(cloud, m, start).indices
    x = cloud.metric_coords
    centers = x[centroids]
    blocks = []
    for scale, mlp in zip(spec.scales, params):
        table = neighbor_indices(x, centers, scale.neighborhood, self_idx=centroids)
        g = stack_groupings([table], np.zeros(1, dtype=np.int64), x, centers[None])
        out, _ = GroupEncoder(mlp, use_coords).forward(cloud.features, g, train, rng)
        blocks.append(out)
    return PointCloud(centers, np.hstack(blocks)), centroids


def sa_level_forward(cloud: PointCloud, spec: SetAbstractionSpec, params: Sequence[MLP], train=False, start=0, use_coords=True, rng=None) -> PointCloud:
    """Sample centroids by FPS, group each scale and encode; output points are
    the centroids carrying the (concatenated) region features."""
    out, _ = _sa_encode(cloud, spec, params, train, start, use_coords, rng)
    return out


def msg_level_forward(cloud: PointCloud, spec: SetAbstractionSpec, params: Sequence[MLP], train=False, start=0, use_coords=True, rng=None) -> PointCloud:
    """Multi-scale grouping: per-scale features concatenated in declared order."""
    if spec.combine is not Combine.MULTI_SCALE:
        raise ConfigurationError("msg_level_forward needs a multi-scale spec")
    out, _ = _sa_encode(cloud, spec, params, train, start, use_coords, rng)
    return out


def mrg_level_forward(
    lower: PointCloud,
    raw: PointCloud,
    spec: MultiResolutionSpec,
    params: Tuple[MLP, MLP],
    train=False,
    start=0,
    use_coords=True,
    rng=None,
) -> PointCloud:
    """Multi-resolution grouping at centroids sampled from ``lower``.

    Vector A encodes the sub-regions of ``lower`` around each centroid;
    vector B encodes the raw points of the same region directly. The output
    carries ``[A | B]``.
    """
    mlp_a, mlp_b = params
    m = min(spec.num_centroids, lower.n)
    centroids = farthest_point_sample(lower, m, start).indices
    centers = lower.metric_coords[centroids]
    table_a = neighbor_indices(lower.metric_coords, centers, spec.lower.neighborhood, self_idx=centroids)
    table_b = neighbor_indices(raw.metric_coords, centers, spec.raw.neighborhood)
    zero = np.zeros(1, dtype=np.int64)
    ga = stack_groupings([table_a], zero, lower.metric_coords, centers[None])
    gb = stack_groupings([table_b], zero, raw.metric_coords, centers[None])
    a, _ = GroupEncoder(mlp_a, use_coords).forward(lower.features, ga, train, rng)
    b, _ = GroupEncoder(mlp_b, use_coords).forward(raw.features, gb, train, rng)
    return PointCloud(centers, np.hstack([a, b]))


# -- interpolation ------------------------------------------------------------------

COINCIDENT = 1e-12


def interpolation_weights(targets: np.ndarray, sources: np.ndarray, k: int = 3, power: float = 2.0):
    """Inverse-distance weights over the ``k`` nearest sources.

    Returns ``(idx, coef)`` of shape (M, k) where ``coef`` are the normalized
    weights. Targets that coincide with a source (distance < 1e-12) get a
    one-hot weight on that source.
    """
    k = min(k, len(sources))
    idx, d2, _ = query(sources, targets, KNN(k), method=_auto_method(len(sources), len(targets)))
    dist = np.sqrt(d2)
    hit = dist[:, 0] < COINCIDENT
    safe = np.where(hit[:, None], 1.0, dist)
    w = safe ** (-power)
    coef = w / w.sum(axis=1, keepdims=True)
    coef[hit] = 0.0
    coef[hit, 0] = 1.0
    return idx, coef


def interpolate_rows(feats: np.ndarray, idx: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """Weighted average written as nearest + sum of weighted differences.

    Constant features and coincident targets are reproduced exactly.
    """
    base = feats[idx[:, 0]]
    out = base.copy()
    for j in range(1, idx.shape[1]):
        out += coef[:, j : j + 1] * (feats[idx[:, j]] - base)
    return out


def interpolate_rows_backward(dout: np.ndarray, idx: np.ndarray, coef: np.ndarray, n_sources: int) -> np.ndarray:
    dfeats = np.zeros((n_sources, dout.shape[1]))
    lead = 1.0 - coef[:, 1:].sum(axis=1)
    np.add.at(dfeats, idx[:, 0], lead[:, None] * dout)
    for j in range(1, idx.shape[1]):
        np.add.at(dfeats, idx[:, j], coef[:, j : j + 1] * dout)
    return dfeats


def interpolate_features(targets, sources, source_features, k: int = 3, power: float = 2.0) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.float64)
    sources = np.asarray(sources, dtype=np.float64)
    feats = np.asarray(source_features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if k > len(sources):
        raise ValueError(f"k={k} exceeds the {len(sources)} source points")
    idx, coef = interpolation_weights(targets, sources, k, power)
    return interpolate_rows(feats, idx, coef)


def fp_level_forward(
    coarse: PointCloud,
    fine_coords,
    skip_features,
    spec: FeaturePropagationSpec,
    params: MLP,
    train: bool = False,
    rng=None,
):
    """Interpolate coarse features onto the fine points, append the skip-link
    features and apply the per-point MLP. Returns ``(features, cache)``."""
    fine = np.asarray(fine_coords, dtype=np.float64)
    skip = np.zeros((len(fine), 0)) if skip_features is None else np.asarray(skip_features, dtype=np.float64)
    idx, coef = interpolation_weights(fine, coarse.metric_coords, spec.interp_k, spec.interp_power)
    interp = interpolate_rows(coarse.features, idx, coef)
    x = np.hstack([interp, skip])
    if x.shape[1] != params.in_width:
        raise ConfigurationError(f"FP expects width {params.in_width}, got {interp.shape[1]} interpolated + {skip.shape[1]} skip")
    out, caches = params.forward(x, train, rng)
    return out, (idx, coef, caches, coarse.n, interp.shape[1])


def fp_level_backward(dout: np.ndarray, params: MLP, cache):
    """Returns gradients for (coarse features, skip features)."""
    idx, coef, caches, n_coarse, c_interp = cache
    dx = params.backward(dout, caches, need_dx=True)
    dcoarse = interpolate_rows_backward(dx[:, :c_interp], idx, coef, n_coarse)
    return dcoarse, dx[:, c_interp:]
