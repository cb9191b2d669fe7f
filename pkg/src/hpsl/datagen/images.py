"""Grayscale images to 2D point sets, and PGM input."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..cloud import PointCloud

PAD_JITTER_SIGMA = 0.01
PAD_JITTER_CLIP = 0.03


def pixels_to_pointcloud(image, target_n: int = 512, rng=None, threshold: float = 0.5) -> PointCloud:
    """Bright pixels become points in [-1, 1]^2, image center at the origin, y up.

    Short sets are filled to ``target_n`` by jittered copies of random valid
    points; long sets are subsampled uniformly without replacement.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"image must be H x W, got shape {img.shape}")
    rng = rng if rng is not None else np.random.default_rng()
    h, w = img.shape
    rows, cols = np.nonzero(img > threshold)
    if len(rows) == 0:
        raise ValueError(f"image has no pixel brighter than {threshold}")
    pts = np.column_stack([(cols + 0.5) / w * 2 - 1, 1 - (rows + 0.5) / h * 2])
    if len(pts) > target_n:
        pts = pts[np.sort(rng.choice(len(pts), target_n, replace=False))]
    elif len(pts) < target_n:
        src = rng.integers(len(pts), size=target_n - len(pts))
        jitter = np.clip(rng.normal(0.0, PAD_JITTER_SIGMA, (len(src), 2)), -PAD_JITTER_CLIP, PAD_JITTER_CLIP)
        pts = np.vstack([pts, pts[src] + jitter])
    return PointCloud(pts)


def _pgm_tokens(data: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        out.append(data[start:pos])
    return out, pos


def parse_pgm(data: bytes) -> np.ndarray:
    """Decode a P2 (ASCII) or P5 (binary) PGM to intensities in [0, 1]."""
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise ValueError("not a PGM file (expected P2 or P5)")
    (w, h, maxval), pos = _pgm_tokens(data, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ValueError("invalid PGM dimensions or maxval")
    if magic == b"P2":
        values = np.array(data[pos:].split()[: w * h], dtype=np.float64)
    else:
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = data[pos + 1 : pos + 1 + w * h * dtype.itemsize]
        values = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    if values.size != w * h:
        raise ValueError(f"PGM holds {values.size} pixels, expected {w * h}")
    return values.reshape(h, w) / maxval


def read_pgm(path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())
