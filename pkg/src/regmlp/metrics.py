"""Evaluation metrics computed outside the gradient tape."""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError


def dice(a, b, label):
    """Dice overlap 2|A^B| / (|A|+|B|) of one label; 1.0 when both empty."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"label map shapes differ: {a.shape} vs {b.shape}")
    ma = a == label
    mb = b == label
    denom = int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / denom


def mean_dice(a, b, labels):
    return float(np.mean([dice(a, b, k) for k in labels]))


def mean_epe(predicted, truth):
    """Mean Euclidean distance between per-voxel displacement vectors."""
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"field shapes differ: {p.shape} vs {t.shape}")
    return float(np.mean(np.linalg.norm(p - t, axis=-1)))


def mean_magnitude(field):
    f = np.asarray(field, dtype=np.float64)
    return float(np.mean(np.linalg.norm(f, axis=-1)))
