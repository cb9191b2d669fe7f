"""Indoor scenes: synthetic rooms, virtual scans, training cubes, vote merging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..cloud import PointCloud
from .mesh import TriangleMesh, box_mesh, quad_mesh, sample_mesh_surface

UNANNOTATED, FLOOR, WALL, FURNITURE = 0, 1, 2, 3
ROOM_CLASSES = ("unannotated", "floor", "wall", "furniture")


def make_room_mesh(rng, size=None, n_furniture=None, wall_height=None) -> TriangleMesh:
    """Floor, four walls and box furniture, z up, floor at z = 0."""
    sx, sy = size if size is not None else rng.uniform(3.5, 5.5, 2)
    h = wall_height if wall_height is not None else rng.uniform(2.5, 3.0)
    parts = [quad_mesh((0, 0, 0), (sx, 0, 0), (0, sy, 0), FLOOR)]
    parts.append(quad_mesh((0, 0, 0), (0, 0, h), (sx, 0, 0), WALL))
    parts.append(quad_mesh((0, sy, 0), (sx, 0, 0), (0, 0, h), WALL))
    parts.append(quad_mesh((0, 0, 0), (0, sy, 0), (0, 0, h), WALL))
    parts.append(quad_mesh((sx, 0, 0), (0, 0, h), (0, sy, 0), WALL))
    k = n_furniture if n_furniture is not None else int(rng.integers(2, 5))
    for _ in range(k):
        dims = rng.uniform([0.4, 0.4, 0.4], [1.2, 1.2, 1.2])
        cx = rng.uniform(dims[0] / 2 + 0.1, sx - dims[0] / 2 - 0.1)
        cy = rng.uniform(dims[1] / 2 + 0.1, sy - dims[1] / 2 - 0.1)
        parts.append(box_mesh(dims, (cx, cy, dims[2] / 2), FURNITURE))
    return TriangleMesh.concatenate(parts)


def make_room_scene(rng, n_points: int = 60000, **kwargs) -> PointCloud:
    """Labeled point cloud sampled from a synthetic room mesh."""
    return sample_mesh_surface(make_room_mesh(rng, **kwargs), n_points, rng)


# -- virtual scans ----------------------------------------------------------------

@dataclass(frozen=True)
class ScanCamera:
    position: Tuple[float, float, float]
    heading: Tuple[float, float, float]
    up: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    plane_w: int = 100
    plane_h: int = 75
    fov: float = np.pi / 3  # horizontal, radians

    def __post_init__(self):
        h, u = np.asarray(self.heading, float), np.asarray(self.up, float)
        if abs(np.linalg.norm(h) - 1) > 1e-9 or abs(np.linalg.norm(u) - 1) > 1e-9:
            raise ValueError("heading and up must be unit vectors")
        if abs(h @ u) > 1e-9:
            raise ValueError("heading must be perpendicular to up")
        if self.plane_w < 1 or self.plane_h < 1:
            raise ValueError("image plane needs at least one pixel")
        if not 0 < self.fov < np.pi:
            raise ValueError("fov must be in (0, pi)")

    @property
    def focal(self) -> float:
        return (self.plane_w / 2) / np.tan(self.fov / 2)

    def project(self, points: np.ndarray):
        """Pixel (row, col), depth and in-frustum flag for each point."""
        h, u = np.asarray(self.heading), np.asarray(self.up)
        right = np.cross(h, u)
        v = points - np.asarray(self.position)
        depth = v @ h
        ok = depth > 1e-9
        safe = np.where(ok, depth, 1.0)
        col = np.floor(self.plane_w / 2 + self.focal * (v @ right) / safe).astype(np.int64)
        row = np.floor(self.plane_h / 2 - self.focal * (v @ u) / safe).astype(np.int64)
        ok &= (col >= 0) & (col < self.plane_w) & (row >= 0) & (row < self.plane_h)
        return row, col, depth, ok


@dataclass(frozen=True, eq=False)
class Scan:
    camera: ScanCamera
    indices: np.ndarray  # scene point indices that survived
    cloud: Optional[PointCloud]  # None when nothing is in view

    @property
    def empty(self) -> bool:
        return self.cloud is None


def scan_cameras(scene: PointCloud, camera_count: int = 8, height: float = 1.5, floor_label: int = FLOOR, **camera_kwargs) -> List[ScanCamera]:
    """Cameras ``height`` above the floor centroid, headings evenly spread."""
    x = scene.metric_coords
    floor = None
    if scene.labels is not None:
        floor = x[scene.labels == floor_label]
    if floor is None or len(floor) == 0:
        base = x.mean(axis=0)
        base[2] = x[:, 2].min()
    else:
        base = floor.mean(axis=0)
    pos = tuple(base + np.array([0.0, 0.0, height]))
    cams = []
    for k in range(camera_count):
        a = 2 * np.pi * k / camera_count
        cams.append(ScanCamera(pos, (float(np.cos(a)), float(np.sin(a)), 0.0), **camera_kwargs))
    return cams


def scan_with_camera(scene: PointCloud, camera: ScanCamera) -> Scan:
    """Keep, per pixel, the scene point nearest to the camera."""
    row, col, depth, ok = camera.project(scene.metric_coords)
    cand = np.flatnonzero(ok)
    if len(cand) == 0:
        return Scan(camera, cand, None)
    pix = row[cand] * camera.plane_w + col[cand]
    order = np.lexsort((cand, depth[cand], pix))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix[order][1:] != pix[order][:-1]
    kept = np.sort(cand[order[first]])
    return Scan(camera, kept, scene.subset(kept))


def virtual_scan(scene: PointCloud, camera_count: int = 8, **kwargs) -> List[Scan]:
    """Single-viewpoint resamplings of ``scene``, one per heading."""
    return [scan_with_camera(scene, cam) for cam in scan_cameras(scene, camera_count, **kwargs)]


# -- training cubes ----------------------------------------------------------------

@dataclass(frozen=True)
class CubeConfig:
    size: Tuple[float, float, float] = (1.5, 1.5, 3.0)
    stride: float = 0.75
    voxel: float = 0.05
    target_n: int = 8192
    occupancy_min: float = 0.02
    annotated_min: float = 0.70
    unannotated_label: int = UNANNOTATED


@dataclass(frozen=True, eq=False)
class Cube:
    origin: np.ndarray  # minimum corner
    point_indices: np.ndarray  # scene index of every output point (with repeats when padded)
    cloud: PointCloud
    occupancy: float
    annotated: float


def _voxel_stats(local: np.ndarray, labels: Optional[np.ndarray], cfg: CubeConfig) -> Tuple[float, float]:
    dims = np.round(np.asarray(cfg.size) / cfg.voxel).astype(np.int64)
    v = np.minimum(np.floor(local / cfg.voxel).astype(np.int64), dims - 1)
    keys = (v[:, 0] * dims[1] + v[:, 1]) * dims[2] + v[:, 2]
    occupied = np.unique(keys)
    occupancy = len(occupied) / float(np.prod(dims))
    if labels is None:
        return occupancy, 0.0
    annotated = np.unique(keys[labels != cfg.unannotated_label])
    return occupancy, len(annotated) / len(occupied)


def extract_cubes(scene: PointCloud, config: CubeConfig = CubeConfig(), rng=None) -> List[Cube]:
    """Slide a cube over the scene footprint and keep the qualifying ones.

    A cube qualifies when at least ``occupancy_min`` of its voxels hold a
    point and at least ``annotated_min`` of the occupied voxels hold an
    annotated point. Qualifying cubes are resampled to exactly ``target_n``
    points (uniform subsample, or padding with uniformly drawn repeats).
    """
    rng = rng if rng is not None else np.random.default_rng()
    x = scene.metric_coords
    lo, hi = x.min(axis=0), x.max(axis=0)
    size = np.asarray(config.size)

    def starts(a, b, s):
        if b - a <= s:
            return np.array([a])
        return np.arange(a, b - s + 1e-9, config.stride)

    cubes = []
    for x0 in starts(lo[0], hi[0], size[0]):
        for y0 in starts(lo[1], hi[1], size[1]):
            origin = np.array([x0, y0, lo[2]])
            local = x - origin
            inside = np.flatnonzero(np.all((local >= 0) & (local < size), axis=1))
            if len(inside) == 0:
                continue
            labels = scene.labels[inside] if scene.labels is not None else None
            occ, ann = _voxel_stats(local[inside], labels, config)
            if occ < config.occupancy_min or ann < config.annotated_min:
                continue
            if len(inside) >= config.target_n:
                pick = np.sort(rng.choice(inside, config.target_n, replace=False))
            else:
                pick = np.concatenate([inside, rng.choice(inside, config.target_n - len(inside))])
            cubes.append(Cube(origin, pick, scene.subset(pick), occ, ann))
    return cubes


def merge_votes(per_cube_predictions: Sequence[Tuple[np.ndarray, np.ndarray]], n_points: int) -> np.ndarray:
    """Modal label per scene point from ``(point_indices, labels)`` pairs.

    Ties go to the lowest label id. Every point must receive a vote.
    """
    pairs = [(np.asarray(i, dtype=np.int64), np.asarray(l, dtype=np.int64)) for i, l in per_cube_predictions]
    if not pairs:
        raise ValueError(f"no predictions; all {n_points} points uncovered")
    n_labels = 1 + max((int(l.max()) for _, l in pairs if l.size), default=0)
    votes = np.zeros((n_points, n_labels), dtype=np.int64)
    for idx, lab in pairs:
        if idx.shape != lab.shape:
            raise ValueError("each cube needs one predicted label per point index")
        np.add.at(votes, (idx, lab), 1)
    uncovered = np.flatnonzero(votes.sum(axis=1) == 0)
    if len(uncovered):
        shown = ", ".join(map(str, uncovered[:20])) + (" ..." if len(uncovered) > 20 else "")
        raise ValueError(f"{len(uncovered)} points have no vote: {shown}")
    return votes.argmax(axis=1)
