"""Axis-aligned box geometry on the 100x100 unit canvas."""

from __future__ import annotations

import numpy as np

from .errors import InputError

CANVAS = 100.0


def check_box(box, context: str = "box") -> np.ndarray:
    """Validate x1 < x2, y1 < y2 and finiteness; returns the box as float64."""
    b = np.asarray(box, dtype=np.float64).reshape(-1)
    if b.shape != (4,):
        raise InputError(f"{context}: expected 4 coordinates, got {b.shape}")
    if not np.isfinite(b).all():
        raise InputError(f"{context}: non-finite coordinates {b.tolist()}")
    if not (b[0] < b[2] and b[1] < b[3]):
        raise InputError(f"{context}: degenerate box {b.tolist()} (need x1 < x2 and y1 < y2)")
    return b


def area(box) -> float:
    b = np.asarray(box, dtype=np.float64)
    return float((b[2] - b[0]) * (b[3] - b[1]))


def iou(a, b) -> float:
    """Intersection over union of two valid boxes; symmetric, in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = area(a) + area(b) - inter
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between box sets a (n, 4) and b (k, 4), as an (n, k) array."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union
