"""Independent reference implementations used as test oracles.

These are written as plain loops, deliberately unlike the library code.
"""

import math

import numpy as np


def scalar_distance(a, b):
    return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


def fps_rescan(points, m, start):
    """O(N^2 m) farthest point sampling: every step rescans all pairs."""
    pts = np.asarray(points, dtype=np.float64)
    chosen = [start]
    while len(chosen) < m:
        best, best_d = None, -1.0
        for i in range(len(pts)):
            if i in chosen:
                continue
            d = min(float(np.sum((pts[i] - pts[j]) ** 2)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def ball_rows(points, centers, r, cap):
    """Per center: indices within r, nearest first (ties by index), capped."""
    out = []
    for c in centers:
        d2 = ((points - c) ** 2).sum(axis=1)
        inside = [(d2[i], i) for i in range(len(points)) if d2[i] <= r * r]
        out.append([i for _, i in sorted(inside)[:cap]])
    return out


def knn_rows(points, centers, k):
    out = []
    for c in centers:
        d2 = ((points - c) ** 2).sum(axis=1)
        out.append([i for _, i in sorted((d2[i], i) for i in range(len(points)))[:k]])
    return out


def idw(target, sources, feats, k, p):
    """Inverse-distance weighting over the k nearest sources, with exact hits."""
    d = [scalar_distance(target, s) for s in sources]
    order = sorted(range(len(sources)), key=lambda i: (d[i], i))[:k]
    if d[order[0]] < 1e-12:
        return np.array(feats[order[0]], dtype=np.float64)
    w = [1.0 / d[i] ** p for i in order]
    total = sum(w)
    return sum(wi * np.asarray(feats[i], dtype=np.float64) for wi, i in zip(w, order)) / total


def iou_by_hand(pred, truth, classes):
    vals = []
    for c in classes:
        inter = sum(1 for p, t in zip(pred, truth) if p == c and t == c)
        union = sum(1 for p, t in zip(pred, truth) if p == c or t == c)
        if union:
            vals.append(inter / union)
    return sum(vals) / len(vals)


def ranks(values):
    """Average ranks, 1-based, ties sharing their mean rank."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    out = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            out[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return out


def spearman(a, b):
    ra, rb = ranks(list(a)), ranks(list(b))
    ma, mb = sum(ra) / len(ra), sum(rb) / len(rb)
    cov = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    va = sum((x - ma) ** 2 for x in ra)
    vb = sum((y - mb) ** 2 for y in rb)
    return cov / math.sqrt(va * vb)


def occlusion_violations(scene, scan):
    """Kept points that have a nearer scene point on the same pixel."""
    row, col, depth, ok = scan.camera.project(scene.metric_coords)
    nearest = {}
    for i in np.flatnonzero(ok):
        key = (int(row[i]), int(col[i]))
        nearest[key] = min(nearest.get(key, np.inf), depth[i])
    bad = []
    for i in scan.indices:
        if depth[i] > nearest[(int(row[i]), int(col[i]))]:
            bad.append(int(i))
    covered = len(nearest) == len(scan.indices)
    return bad, covered
