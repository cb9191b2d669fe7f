"""Point-cloud data model, normalization and the text file format."""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class CloudFormatError(ValueError):
    """Raised when a point-cloud file cannot be parsed."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MetricMode(enum.Enum):
    FEATURE_SPACE_IS_METRIC = "feature_space_is_metric"
    SEPARATE_EMBEDDING = "separate_embedding"


@dataclass(frozen=True)
class MetricConfig:
    """Whether grouping distances live on the network's own coordinates.

    In ``SEPARATE_EMBEDDING`` mode the metric coordinates are only used to
    sample and group; the network consumes the feature channels alone.
    """

    mode: MetricMode = MetricMode.FEATURE_SPACE_IS_METRIC

    @property
    def coords_are_inputs(self) -> bool:
        return self.mode is MetricMode.FEATURE_SPACE_IS_METRIC


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N points with d metric coordinates and C feature channels.

    Arrays are copied to float64 and made read-only on construction.
    ``labels`` are optional per-point semantic labels, ``names`` an optional
    cloud-level class id.
    """

    metric_coords: np.ndarray
    features: np.ndarray = field(default=None)  # type: ignore[assignment]
    labels: Optional[np.ndarray] = None
    names: Optional[int] = None

    def __post_init__(self):
        coords = np.array(self.metric_coords, dtype=np.float64)
        if coords.ndim == 1:
            coords = coords[:, None]
        if coords.ndim != 2 or coords.shape[0] < 1 or coords.shape[1] < 1:
            raise ValueError(f"metric_coords must be N x d with N, d >= 1, got shape {coords.shape}")
        n = coords.shape[0]
        if self.features is None:
            feats = np.zeros((n, 0))
        else:
            feats = np.array(self.features, dtype=np.float64)
            if feats.ndim == 1:
                feats = feats[:, None]
        if feats.ndim != 2 or feats.shape[0] != n:
            raise ValueError(f"features must have {n} rows, got shape {feats.shape}")
        if not np.all(np.isfinite(coords)) or not np.all(np.isfinite(feats)):
            raise ValueError("point cloud entries must be finite")
        labels = self.labels
        if labels is not None:
            raw = np.asarray(labels)
            labels = raw.astype(np.int64)
            if labels.shape != (n,) or np.any(labels < 0) or not np.array_equal(labels, raw):
                raise ValueError(f"labels must be {n} non-negative integers")
            labels = _frozen(labels)
        if self.names is not None:
            if int(self.names) != self.names or self.names < 0:
                raise ValueError("class label must be a non-negative integer")
            object.__setattr__(self, "names", int(self.names))
        object.__setattr__(self, "metric_coords", _frozen(coords))
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.metric_coords.shape[0]

    @property
    def d(self) -> int:
        return self.metric_coords.shape[1]

    @property
    def c(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        return PointCloud(
            self.metric_coords[idx],
            self.features[idx],
            None if self.labels is None else self.labels[idx],
            self.names,
        )

    def replace(self, **changes) -> "PointCloud":
        fields = dict(
            metric_coords=self.metric_coords,
            features=self.features,
            labels=self.labels,
            names=self.names,
        )
        fields.update(changes)
        return PointCloud(**fields)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        return (
            np.array_equal(self.metric_coords, other.metric_coords)
            and np.array_equal(self.features, other.features)
            and (self.labels is None or np.array_equal(self.labels, other.labels))
            and self.names == other.names
        )

    __hash__ = None  # type: ignore[assignment]


def normalize_unit_ball(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1.

    An all-coincident cloud maps every point to the origin.
    """
    x = cloud.metric_coords
    centered = x - x.mean(axis=0)
    radius = np.sqrt((centered**2).sum(axis=1)).max()
    if radius > 0:
        centered = centered / radius
    else:
        centered = np.zeros_like(centered)
    return cloud.replace(metric_coords=centered)


def pairwise_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def _format_header(cloud: PointCloud) -> str:
    cls = "-" if cloud.names is None else str(cloud.names)
    labeled = 0 if cloud.labels is None else 1
    return f"#pcl d={cloud.d} c={cloud.c} labeled={labeled} class={cls}"


def format_cloud(cloud: PointCloud) -> str:
    lines = [_format_header(cloud)]
    values = np.hstack([cloud.metric_coords, cloud.features])
    for i in range(cloud.n):
        row = [repr(float(v)) for v in values[i]]
        if cloud.labels is not None:
            row.append(str(int(cloud.labels[i])))
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_cloud(cloud: PointCloud, path) -> None:
    atomic_write_text(path, format_cloud(cloud))


def _parse_header(line: str) -> dict:
    parts = line.split()
    if not parts or parts[0] != "#pcl":
        raise CloudFormatError("expected header starting with '#pcl'", 1)
    fields = {}
    for part in parts[1:]:
        key, sep, value = part.partition("=")
        if not sep:
            raise CloudFormatError(f"malformed header field {part!r}", 1)
        fields[key] = value
    missing = {"d", "c", "labeled", "class"} - fields.keys()
    if missing:
        raise CloudFormatError(f"header missing fields: {sorted(missing)}", 1)
    try:
        d, c = int(fields["d"]), int(fields["c"])
    except ValueError:
        raise CloudFormatError("header d and c must be integers", 1) from None
    if d < 1 or c < 0:
        raise CloudFormatError("header requires d >= 1 and c >= 0", 1)
    if fields["labeled"] not in ("0", "1"):
        raise CloudFormatError("header labeled must be 0 or 1", 1)
    cls = fields["class"]
    if cls == "-":
        names = None
    else:
        try:
            names = int(cls)
        except ValueError:
            raise CloudFormatError(f"header class must be an integer or '-', got {cls!r}", 1) from None
        if names < 0:
            raise CloudFormatError("header class must be non-negative", 1)
    return {"d": d, "c": c, "labeled": fields["labeled"] == "1", "names": names}


def parse_cloud(text: str) -> PointCloud:
    lines = text.split("\n")
    if not lines or not lines[0].strip():
        raise CloudFormatError("empty file", 1)
    header = _parse_header(lines[0].strip())
    d, c, labeled = header["d"], header["c"], header["labeled"]
    width = d + c + int(labeled)
    rows, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        if len(tokens) != width:
            raise CloudFormatError(f"expected {width} columns (d={d}, c={c}, labeled={int(labeled)}), got {len(tokens)}", lineno)
        try:
            values = [float(t) for t in tokens[: d + c]]
        except ValueError as exc:
            raise CloudFormatError(f"non-numeric value: {exc}", lineno) from None
        if not all(math.isfinite(v) for v in values):
            raise CloudFormatError("non-finite value", lineno)
        rows.append(values)
        if labeled:
            try:
                lab = int(tokens[-1])
            except ValueError:
                raise CloudFormatError(f"label must be an integer, got {tokens[-1]!r}", lineno) from None
            if lab < 0:
                raise CloudFormatError("label must be non-negative", lineno)
            labels.append(lab)
    if not rows:
        raise CloudFormatError("no points in file", len(lines))
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), width - int(labeled))
    return PointCloud(
        arr[:, :d],
        arr[:, d:],
        np.array(labels, dtype=np.int64) if labeled else None,
        header["names"],
    )


def read_cloud(path) -> PointCloud:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_cloud(fh.read())
