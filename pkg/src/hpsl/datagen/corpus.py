"""Desk-scale synthetic corpora written in the cloud text format."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from ..cloud import PointCloud, atomic_write_text, normalize_unit_ball, read_cloud, write_cloud
from ..engine import rng_stream
from .augment import rotation_about_axis
from .mesh import box_mesh, cylinder_mesh, sample_mesh_surface, sphere_mesh, torus_mesh
from .scenes import ROOM_CLASSES, make_room_scene

KINDS = ("2d-shapes", "3d-solids", "room-scenes")
CLASS_NAMES = {
    "2d-shapes": ("circle", "square", "triangle"),
    "3d-solids": ("sphere", "box", "torus", "cylinder"),
    "room-scenes": ROOM_CLASSES,
}
OUTLINE_NOISE = 0.02
SURFACE_NOISE = 0.01


@dataclass(eq=False)
class Dataset:
    kind: str
    class_names: Tuple[str, ...]
    train: List[PointCloud]
    test: List[PointCloud]

    @property
    def segmentation(self) -> bool:
        return self.kind == "room-scenes"

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def dims(self) -> Tuple[int, int]:
        c = self.train[0] if self.train else self.test[0]
        return c.d, c.c


# -- shape generators ------------------------------------------------------------------

def _polygon_outline(corners: np.ndarray, n: int, rng) -> np.ndarray:
    """Points uniform along a closed polygon's perimeter."""
    edges = np.roll(corners, -1, axis=0) - corners
    lengths = np.linalg.norm(edges, axis=1)
    s = rng.uniform(0, lengths.sum(), n)
    cum = np.concatenate([[0], np.cumsum(lengths)])
    k = np.minimum(np.searchsorted(cum, s, side="right") - 1, len(edges) - 1)
    t = (s - cum[k]) / lengths[k]
    return corners[k] + t[:, None] * edges[k]


def shape_2d(label: int, n: int, rng) -> np.ndarray:
    """Noisy outline of a unit circle, a square or a triangle."""
    if label == 0:
        a = rng.uniform(0, 2 * np.pi, n)
        pts = np.column_stack([np.cos(a), np.sin(a)])
    else:
        if label == 1:
            half = rng.uniform(0.6, 0.75)
            corners = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
        else:
            r = rng.uniform(0.8, 1.0)
            a = np.pi / 2 + np.arange(3) * 2 * np.pi / 3
            corners = r * np.column_stack([np.cos(a), np.sin(a)])
        pts = _polygon_outline(corners, n, rng) @ rotation_about_axis(rng.uniform(0, 2 * np.pi), 2).T
    return pts + rng.normal(0.0, OUTLINE_NOISE, pts.shape)


def solid_3d(label: int, n: int, rng) -> np.ndarray:
    """Surface samples of a randomly proportioned primitive, unit-ball normalized."""
    if label == 0:
        mesh = sphere_mesh(1.0)
    elif label == 1:
        mesh = box_mesh(rng.uniform(0.5, 1.0, 3))
    elif label == 2:
        mesh = torus_mesh(rng.uniform(0.6, 0.8), rng.uniform(0.15, 0.3))
    else:
        mesh = cylinder_mesh(rng.uniform(0.4, 0.7), rng.uniform(1.0, 1.6))
    pts = sample_mesh_surface(mesh, n, rng).metric_coords
    pts = pts @ rotation_about_axis(rng.uniform(0, 2 * np.pi), 3, 2).T
    pts = pts + rng.normal(0.0, SURFACE_NOISE, pts.shape)
    return normalize_unit_ball(PointCloud(pts)).metric_coords


def make_synthetic_corpus(
    kind: str,
    n_per_class: int,
    points_per_cloud: int,
    seed: int = 0,
    n_test_per_class: Optional[int] = None,
) -> Dataset:
    """Deterministic synthetic corpus.

    Shape kinds give ``n_per_class`` training and ``n_test_per_class``
    (default half as many) test clouds per class. ``room-scenes`` gives that
    many labeled scenes per split for segmentation. Every cloud draws from
    its own random stream keyed by (seed, kind, split, class, index).
    """
    if kind not in KINDS:
        raise ValueError(f"unknown corpus kind {kind!r}; choose from {', '.join(KINDS)}")
    if n_per_class < 1 or points_per_cloud < 1:
        raise ValueError("n_per_class and points_per_cloud must be >= 1")
    n_test = n_test_per_class if n_test_per_class is not None else max(1, n_per_class // 2)
    kind_id = KINDS.index(kind)
    names = CLASS_NAMES[kind]
    splits = {}
    for split_id, (split, count) in enumerate((("train", n_per_class), ("test", n_test))):
        clouds = []
        if kind == "room-scenes":
            for j in range(count):
                rng = rng_stream(seed, kind_id, split_id, 0, j)
                clouds.append(make_room_scene(rng, points_per_cloud))
        else:
            make = shape_2d if kind == "2d-shapes" else solid_3d
            for j in range(count):
                for label in range(len(names)):
                    rng = rng_stream(seed, kind_id, split_id, label, j)
                    clouds.append(PointCloud(make(label, points_per_cloud, rng), names=label))
        splits[split] = clouds
    return Dataset(kind, names, splits["train"], splits["test"])


# -- files ---------------------------------------------------------------------------

MANIFEST = "manifest.json"


def write_corpus(dataset: Dataset, out_dir) -> Path:
    """Write every cloud plus a JSON manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for split in ("train", "test"):
        (out / split).mkdir(exist_ok=True)
        names = []
        for j, cloud in enumerate(getattr(dataset, split)):
            rel = f"{split}/{j:05d}.pcl"
            write_cloud(cloud, out / rel)
            names.append(rel)
        files[split] = names
    manifest = {"kind": dataset.kind, "class_names": list(dataset.class_names), "splits": files}
    path = out / MANIFEST
    atomic_write_text(path, json.dumps(manifest, indent=2) + "\n")
    return path


def read_corpus(path) -> Dataset:
    """Load a corpus from its directory or manifest file."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"corpus manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid manifest JSON ({exc})") from None
    for key in ("kind", "class_names", "splits"):
        if key not in manifest:
            raise ValueError(f"{path}: manifest lacks {key!r}")
    root = path.parent
    splits = {s: [read_cloud(root / rel) for rel in manifest["splits"].get(s, [])] for s in ("train", "test")}
    return Dataset(manifest["kind"], tuple(manifest["class_names"]), splits["train"], splits["test"])
