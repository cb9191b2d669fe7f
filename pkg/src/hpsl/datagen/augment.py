"""Training-time augmentation and random input dropout."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..cloud import PointCloud


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation settings. The all-default config is the identity.

    ``dropout_p`` is the upper bound of the per-cloud drop ratio used by
    random input dropout; the trainer applies it only when dropout training
    is enabled. ``normal_offset`` marks a 3-column block of unit normals in
    the feature matrix that must follow rotations.
    """

    dropout_p: float = 0.0
    jitter_sigma: float = 0.0
    jitter_clip: float = 0.0
    scale_range: Tuple[float, float] = (1.0, 1.0)
    rotate_up_axis: bool = False
    translate_range: float = 0.0
    up_axis: int = 2
    normal_offset: Optional[int] = None

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if not 0 <= self.dropout_p < 1:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.jitter_sigma < 0 or self.jitter_clip < 0 or self.translate_range < 0:
            raise ValueError("jitter and translation magnitudes must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentConfig":
        data = dict(data)
        if "scale_range" in data:
            data["scale_range"] = tuple(data["scale_range"])
        return cls(**data)

    def to_dict(self) -> dict:
        return {
            "dropout_p": self.dropout_p,
            "jitter_sigma": self.jitter_sigma,
            "jitter_clip": self.jitter_clip,
            "scale_range": list(self.scale_range),
            "rotate_up_axis": self.rotate_up_axis,
            "translate_range": self.translate_range,
            "up_axis": self.up_axis,
            "normal_offset": self.normal_offset,
        }


def random_input_dropout(cloud: PointCloud, p: float = 0.95, rng=None) -> PointCloud:
    """Drop each point with probability theta, theta ~ U[0, p] drawn once.

    At least one point always survives: if every point would drop, one is
    kept uniformly at random.
    """
    if not 0 <= p < 1:
        raise ValueError(f"p must be in [0, 1), got {p}")
    rng = rng if rng is not None else np.random.default_rng()
    theta = rng.uniform(0.0, p)
    keep = rng.random(cloud.n) >= theta
    if keep.all():
        return cloud
    if not keep.any():
        keep[rng.integers(cloud.n)] = True
    return cloud.subset(np.flatnonzero(keep))


def rotation_about_axis(angle: float, d: int, axis: int = 2) -> np.ndarray:
    """Rotation matrix for a turn about ``axis`` (in-plane for d = 2)."""
    c, s = np.cos(angle), np.sin(angle)
    if d == 2:
        return np.array([[c, -s], [s, c]])
    if d != 3:
        raise ValueError("up-axis rotation needs d = 2 or d = 3")
    i, j = [a for a in range(3) if a != axis]
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def augment(cloud: PointCloud, config: AugmentConfig, rng=None) -> PointCloud:
    """Rotate about the up axis, scale, translate, then jitter each point."""
    rng = rng if rng is not None else np.random.default_rng()
    x = cloud.metric_coords.copy()
    f = cloud.features.copy()
    n, d = x.shape
    if config.rotate_up_axis:
        r = rotation_about_axis(rng.uniform(0.0, 2 * np.pi), d, config.up_axis)
        x = x @ r.T
        if config.normal_offset is not None:
            o = config.normal_offset
            f[:, o : o + 3] = f[:, o : o + 3] @ r.T
    lo, hi = config.scale_range
    if hi > lo or lo != 1.0:
        x *= rng.uniform(lo, hi)
    if config.translate_range > 0:
        x += rng.uniform(-config.translate_range, config.translate_range, size=d)
    if config.jitter_sigma > 0:
        x += np.clip(rng.normal(0.0, config.jitter_sigma, size=x.shape), -config.jitter_clip, config.jitter_clip)
    if config.normal_offset is not None:
        o = config.normal_offset
        norms = np.linalg.norm(f[:, o : o + 3], axis=1, keepdims=True)
        f[:, o : o + 3] /= np.where(norms > 0, norms, 1.0)
    return cloud.replace(metric_coords=x, features=f)
