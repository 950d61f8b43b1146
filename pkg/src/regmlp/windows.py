"""Window partition and merge: non-overlapping tiling of feature maps.

Partitioning zero-pads the map so every axis is a multiple of the window
extent (low side by the origin shift, high side with the remainder), then
tiles it into [num_windows, window_volume, channels].  The merge is an exact
inverse; both directions move values only, so round trips are bit-exact and
fully differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, crop, pad, reshape, transpose


@dataclass(frozen=True)
class WindowSpec:
    """Per-branch window extents for multi-window token mixing.

    `sizes` are odd per-axis extents applied as cubes; blocks alternate the
    partition origin by half a window on odd block indices when
    `shift_alternation` is set.
    """

    sizes: tuple = (3, 5, 7)
    shift_alternation: bool = True

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes:
            raise ValueError("window size list must be non-empty")
        if any(s < 1 or s % 2 == 0 for s in sizes):
            raise ValueError(f"window sizes must be odd and >= 1, got {sizes}")
        if list(sizes) != sorted(set(sizes)):
            raise ValueError(f"window sizes must be strictly increasing, got {sizes}")
        object.__setattr__(self, "sizes", sizes)


@dataclass(frozen=True)
class WindowMeta:
    """Exact padding record allowing window_merge to invert window_partition."""

    spatial_shape: tuple
    window: tuple
    low_pad: tuple
    high_pad: tuple
    channels: int
    grid: tuple  # number of windows per axis


def _as_tuple(value, rank):
    if np.isscalar(value):
        return (int(value),) * rank
    t = tuple(int(v) for v in value)
    if len(t) != rank:
        raise ShapeError(f"expected {rank} per-axis values, got {t}")
    return t


def window_partition(f, window, origin_shift=0):
    """Tile a [*spatial, C] tensor into (windows [W, T, C], meta).

    `origin_shift` offsets the tiling origin (values in [0, window)); the
    map is zero-padded by the shift on the low side and up to a window
    multiple on the high side.
    """
    f = f if isinstance(f, Tensor) else Tensor(f)
    spatial = f.shape[:-1]
    rank = len(spatial)
    win = _as_tuple(window, rank)
    shift = _as_tuple(origin_shift, rank)
    if any(w < 1 for w in win):
        raise ShapeError(f"window extents must be >= 1, got {win}")
    if any(not (0 <= s < w) for s, w in zip(shift, win)):
        raise ShapeError(f"origin shift {shift} outside [0, window) for {win}")

    low = shift
    padded = tuple(-(-(n + lo) // w) * w for n, lo, w in zip(spatial, low, win))
    high = tuple(p - n - lo for p, n, lo in zip(padded, spatial, low))
    meta = WindowMeta(spatial, win, low, high, f.shape[-1],
                      tuple(p // w for p, w in zip(padded, win)))

    x = pad(f, [(lo, hi) for lo, hi in zip(low, high)] + [(0, 0)])
    # [g0,w0,g1,w1,...,C] -> [g0,g1,...,w0,w1,...,C] -> [W,T,C]
    split_shape = []
    for g, w in zip(meta.grid, win):
        split_shape.extend([g, w])
    split_shape.append(meta.channels)
    x = reshape(x, tuple(split_shape))
    perm = (
        tuple(2 * i for i in range(rank))
        + tuple(2 * i + 1 for i in range(rank))
        + (2 * rank,)
    )
    x = transpose(x, perm)
    num_windows = int(np.prod(meta.grid))
    volume = int(np.prod(win))
    return reshape(x, (num_windows, volume, meta.channels)), meta


def window_merge(windows, meta):
    """Exact inverse of window_partition; discards the padded margin."""
    w = windows if isinstance(windows, Tensor) else Tensor(windows)
    rank = len(meta.spatial_shape)
    num_windows = int(np.prod(meta.grid))
    volume = int(np.prod(meta.window))
    if w.shape != (num_windows, volume, meta.channels):
        raise ShapeError(
            f"window tensor {w.shape} does not match meta "
            f"({num_windows}, {volume}, {meta.channels})"
        )
    x = reshape(w, meta.grid + meta.window + (meta.channels,))
    perm = []
    for i in range(rank):
        perm.extend([i, rank + i])
    perm.append(2 * rank)
    x = transpose(x, tuple(perm))
    padded = tuple(g * s for g, s in zip(meta.grid, meta.window))
    x = reshape(x, padded + (meta.channels,))
    bounds = [
        (lo, lo + n) for lo, n in zip(meta.low_pad, meta.spatial_shape)
    ] + [(0, meta.channels)]
    return crop(x, bounds)
