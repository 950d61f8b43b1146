"""Training objectives: local NCC similarity, field smoothness, and the
optional supervised endpoint-error term."""

from __future__ import annotations

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    box_filter,
    div,
    mul,
    relu,
    sqrt,
    sub,
    tsum,
)

NCC_EPS = 1e-8


def default_ncc_window(rank):
    return 9 if rank == 2 else 7


def ncc_loss(a, b, window=None, eps=NCC_EPS):
    """1 - mean local normalized cross-correlation over sliding windows.

    Windows are centered cubes of odd extent (default 9 in 2D, 7 in 3D) with
    zero padding; variances are eps-guarded so constant windows contribute
    an NCC of 0.  Perfect match gives ~0, exact anti-correlation ~2.
    """
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"volume shapes differ: {a.shape} vs {b.shape}")
    rank = a.ndim
    win = window if window is not None else default_ncc_window(rank)
    if win % 2 == 0 or win < 1:
        raise ValueError("NCC window must be odd and positive")
    radii = (win // 2,) * rank

    # per-window count of in-range voxels, so boundary windows use their own
    # valid statistics instead of zero padding
    inv_n = Tensor(1.0 / box_filter(Tensor(np.ones(a.shape)), radii).data)

    sum_a = box_filter(a, radii)
    sum_b = box_filter(b, radii)
    sum_aa = box_filter(a * a, radii)
    sum_bb = box_filter(b * b, radii)
    sum_ab = box_filter(a * b, radii)

    cross = sub(sum_ab, mul(mul(sum_a, sum_b), inv_n))
    var_a = relu(sub(sum_aa, mul(mul(sum_a, sum_a), inv_n)))
    var_b = relu(sub(sum_bb, mul(mul(sum_b, sum_b), inv_n)))
    cc = div(cross, sqrt(mul(var_a, var_b) + eps * eps))
    return 1.0 - tsum(cc) * (1.0 / cc.size)


def smoothness_loss(field):
    """Mean squared forward difference over all axes and vector components."""
    f = field if isinstance(field, Tensor) else Tensor(field)
    spatial = f.shape[:-1]
    if any(n < 2 for n in spatial):
        raise ShapeError("smoothness needs at least 2 voxels per axis")
    total = None
    count = 0
    from .autodiff import crop

    for ax, n in enumerate(spatial):
        hi = [(0, m) for m in spatial] + [(0, f.shape[-1])]
        lo = [(0, m) for m in spatial] + [(0, f.shape[-1])]
        hi[ax] = (1, n)
        lo[ax] = (0, n - 1)
        d = sub(crop(f, hi), crop(f, lo))
        sq = tsum(d * d)
        count += d.size
        total = sq if total is None else total + sq
    return total * (1.0 / count)


def supervised_epe_loss(predicted, truth):
    """Mean per-voxel Euclidean distance between two displacement fields.

    Matches a plain per-voxel loop exactly (no epsilon inside the norm), so
    the gradient has a kink where the fields agree exactly.
    """
    p = predicted if isinstance(predicted, Tensor) else Tensor(predicted)
    t = truth if isinstance(truth, Tensor) else Tensor(truth)
    if p.shape != t.shape:
        raise ShapeError(f"field shapes differ: {p.shape} vs {t.shape}")
    d = sub(p, t)
    norms = sqrt(tsum(d * d, axis=-1))
    voxels = int(np.prod(p.shape[:-1]))
    return tsum(norms) * (1.0 / voxels)
