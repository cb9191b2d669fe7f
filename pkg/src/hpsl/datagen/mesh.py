"""Triangle meshes: area-weighted surface sampling and OFF input."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..cloud import PointCloud

DEGENERATE_AREA = 1e-12


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3)
    face_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be V x 3, got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must be F x 3, got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.face_labels is not None:
            lab = np.asarray(self.face_labels, dtype=np.int64)
            if lab.shape != (len(f),):
                raise ValueError("face_labels must have one entry per face")
            object.__setattr__(self, "face_labels", lab)

    def corners(self):
        t = self.vertices[self.faces]
        return t[:, 0], t[:, 1], t[:, 2]

    @property
    def face_normals(self) -> np.ndarray:
        a, b, c = self.corners()
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    @property
    def areas(self) -> np.ndarray:
        a, b, c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @property
    def degenerate(self) -> np.ndarray:
        return self.areas <= DEGENERATE_AREA

    @staticmethod
    def concatenate(meshes) -> "TriangleMesh":
        verts, faces, labels = [], [], []
        base = 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + base)
            base += len(m.vertices)
            labels.append(m.face_labels if m.face_labels is not None else np.zeros(len(m.faces), dtype=np.int64))
        return TriangleMesh(np.vstack(verts), np.vstack(faces), np.concatenate(labels))


def sample_mesh_surface(mesh: TriangleMesh, n: int, rng=None, normals: bool = False) -> PointCloud:
    """Sample ``n`` points uniformly over the surface.

    Faces are drawn with probability proportional to area; within a face,
    barycentric coordinates (u, v) ~ U[0,1]^2 are folded back into the
    triangle when u + v > 1. With ``normals`` the face unit normal becomes a
    3-column feature block. Face labels, if present, become point labels.
    """
    rng = rng if rng is not None else np.random.default_rng()
    areas = np.where(mesh.degenerate, 0.0, mesh.areas)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has no non-degenerate face to sample")
    face = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    fold = u + v > 1
    u[fold], v[fold] = 1 - u[fold], 1 - v[fold]
    a, b, c = mesh.corners()
    pts = a[face] + u[:, None] * (b[face] - a[face]) + v[:, None] * (c[face] - a[face])
    feats = mesh.face_normals[face] if normals else None
    labels = mesh.face_labels[face] if mesh.face_labels is not None else None
    return PointCloud(pts, feats, labels)


def parse_off(text: str) -> TriangleMesh:
    """Parse the OFF subset: ``OFF`` header, counts, vertices, triangles."""
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    rows = [(i + 1, ln) for i, ln in enumerate(lines) if ln]
    if not rows or not rows[0][1].startswith("OFF"):
        raise ValueError("line 1: expected OFF header")
    rest = rows[0][1][3:].split()
    pos = 1
    if rest:
        counts_line, counts = rows[0][0], rest
    else:
        if len(rows) < 2:
            raise ValueError("missing counts line")
        counts_line, counts = rows[1][0], rows[1][1].split()
        pos = 2
    try:
        nv, nf = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise ValueError(f"line {counts_line}: expected vertex and face counts") from None
    if len(rows) < pos + nv + nf:
        raise ValueError(f"expected {nv} vertices and {nf} faces, file ends early")
    verts = np.empty((nv, 3))
    for j in range(nv):
        line_no, ln = rows[pos + j]
        parts = ln.split()
        try:
            verts[j] = [float(t) for t in parts[:3]]
        except ValueError:
            raise ValueError(f"line {line_no}: bad vertex") from None
        if len(parts) < 3 or not np.isfinite(verts[j]).all():
            raise ValueError(f"line {line_no}: bad vertex")
    faces = np.empty((nf, 3), dtype=np.int64)
    for j in range(nf):
        line_no, ln = rows[pos + nv + j]
        parts = ln.split()
        if len(parts) != 4 or parts[0] != "3":
            raise ValueError(f"line {line_no}: only triangle faces are supported")
        try:
            faces[j] = [int(t) for t in parts[1:]]
        except ValueError:
            raise ValueError(f"line {line_no}: bad face") from None
    return TriangleMesh(verts, faces)


def read_off(path) -> TriangleMesh:
    return parse_off(Path(path).read_text(encoding="utf-8"))


# -- primitive surfaces -------------------------------------------------------------

def _grid_mesh(points: np.ndarray, wrap_u: bool, wrap_v: bool) -> TriangleMesh:
    """Triangulate a (U, V, 3) grid of surface points."""
    nu, nv, _ = points.shape
    idx = np.arange(nu * nv).reshape(nu, nv)
    us = range(nu if wrap_u else nu - 1)
    vs = range(nv if wrap_v else nv - 1)
    faces = []
    for i in us:
        for j in vs:
            a, b = idx[i, j], idx[(i + 1) % nu, j]
            c, d = idx[(i + 1) % nu, (j + 1) % nv], idx[i, (j + 1) % nv]
            faces.append((a, b, c))
            faces.append((a, c, d))
    return TriangleMesh(points.reshape(-1, 3), np.array(faces))


def box_mesh(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0), label: int = 0) -> TriangleMesh:
    sx, sy, sz = np.asarray(size, dtype=np.float64) / 2
    corners = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)]) + np.asarray(center)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = [f for a, b, c, d in quads for f in ((a, b, c), (a, c, d))]
    return TriangleMesh(corners, np.array(faces), np.full(12, label))


def sphere_mesh(radius: float = 1.0, segments: int = 24) -> TriangleMesh:
    theta = np.linspace(0, np.pi, segments + 1)[1:-1]
    phi = np.linspace(0, 2 * np.pi, 2 * segments, endpoint=False)
    t, p = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1) * radius
    body = _grid_mesh(ring, wrap_u=False, wrap_v=True)
    n_ring = len(phi)
    top, bottom = len(body.vertices), len(body.vertices) + 1
    last = (len(theta) - 1) * n_ring
    caps = [(top, j, (j + 1) % n_ring) for j in range(n_ring)]
    caps += [(bottom, last + (j + 1) % n_ring, last + j) for j in range(n_ring)]
    verts = np.vstack([body.vertices, [[0, 0, radius], [0, 0, -radius]]])
    return TriangleMesh(verts, np.vstack([body.faces, caps]))


def torus_mesh(major: float = 0.7, minor: float = 0.25, segments: int = 24) -> TriangleMesh:
    u = np.linspace(0, 2 * np.pi, 2 * segments, endpoint=False)
    v = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    r = major + minor * np.cos(vv)
    pts = np.stack([r * np.cos(uu), r * np.sin(uu), minor * np.sin(vv)], axis=-1)
    return _grid_mesh(pts, wrap_u=True, wrap_v=True)


def cylinder_mesh(radius: float = 0.5, height: float = 1.0, segments: int = 32) -> TriangleMesh:
    phi = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    z = np.array([-height / 2, height / 2])
    pp, zz = np.meshgrid(phi, z, indexing="ij")
    side = _grid_mesh(np.stack([radius * np.cos(pp), radius * np.sin(pp), zz], axis=-1), wrap_u=True, wrap_v=False)
    n = len(side.vertices)
    lo, hi = n, n + 1
    caps = [(lo, 2 * ((j + 1) % segments), 2 * j) for j in range(segments)]
    caps += [(hi, 2 * j + 1, 2 * ((j + 1) % segments) + 1) for j in range(segments)]
    verts = np.vstack([side.vertices, [[0, 0, -height / 2], [0, 0, height / 2]]])
    return TriangleMesh(verts, np.vstack([side.faces, caps]))


def quad_mesh(origin, edge_u, edge_v, label: int = 0) -> TriangleMesh:
    o = np.asarray(origin, dtype=np.float64)
    u, v = np.asarray(edge_u, dtype=np.float64), np.asarray(edge_v, dtype=np.float64)
    verts = np.array([o, o + u, o + u + v, o + v])
    return TriangleMesh(verts, np.array([[0, 1, 2], [0, 2, 3]]), np.array([label, label]))
