"""Local correlation volumes.

Two signals guide the registration decoder: similarity between the two
images' features at one resolution (image-level), and similarity between a
level's features and context propagated from the coarser level (step-level).
Both are local: each position is compared against a (2r+1)^D displacement
neighborhood, with out-of-range lookups reading zeros so correlations fade
at boundaries.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    div,
    mul,
    neighbor_stack,
    reshape,
    resize_linear,
    sqrt,
    tsum,
)

DEFAULT_RADIUS = 2
DEFAULT_EPS = 1e-8
_NORM_GUARD = 1e-12  # keeps sqrt differentiable on zero-padded lookups


def num_channels(radius, rank):
    return (2 * radius + 1) ** rank


def local_correlation(a, b, radius=DEFAULT_RADIUS, normalize=True, eps=DEFAULT_EPS):
    """Correlation volume between two feature maps.

    Channel d of the output at position p is <a(p), b(p+delta_d)> for the
    lexicographically ordered displacements of the radius-`radius`
    neighborhood (zero displacement at the center channel).  With
    `normalize` the dot product is divided by the feature norms (eps
    guarded), bounding every value to [-1, 1].  Differentiable in both maps.
    """
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"feature shapes differ: {a.shape} vs {b.shape}")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    rank = a.ndim - 1
    radii = (radius,) * rank

    stacked = neighbor_stack(b, radii)  # [*S, K, C]
    raw = tsum(mul(reshape(a, a.shape[:-1] + (1, a.shape[-1])), stacked), axis=-1)
    if not normalize:
        return raw
    norm_a = sqrt(tsum(mul(a, a), axis=-1, keepdims=True) + _NORM_GUARD)  # [*S,1]
    norm_b = sqrt(tsum(mul(b, b), axis=-1, keepdims=True) + _NORM_GUARD)
    norm_b_shifted = reshape(
        tsum(neighbor_stack(norm_b, radii), axis=-1), raw.shape
    )  # zero-padded gather of per-position norms
    return div(raw, mul(norm_a, norm_b_shifted) + eps)


def step_context_correlation(current, coarser_context, lift, radius=DEFAULT_RADIUS):
    """Correlate a level's features against upsampled coarser context.

    `coarser_context` (extents ceil(current/2)) is channel-lifted by the
    learned `lift` module and linearly upsampled to `current`'s grid; the
    normalized local correlation and the upsampled context are both returned
    for concatenation into the decoder blocks.
    """
    cur = current if isinstance(current, Tensor) else Tensor(current)
    ctx = coarser_context if isinstance(coarser_context, Tensor) else Tensor(coarser_context)
    expected = tuple(-(-n // 2) for n in cur.shape[:-1])
    if ctx.shape[:-1] != expected:
        raise ShapeError(
            f"context extents {ctx.shape[:-1]} are not the halved "
            f"extents {expected} of {cur.shape[:-1]}"
        )
    lifted = lift(ctx)
    if lifted.shape[-1] != cur.shape[-1]:
        raise ShapeError("lift must match the current level's channel count")
    upsampled = resize_linear(lifted, cur.shape[:-1])
    corr = local_correlation(cur, upsampled, radius=radius, normalize=True)
    return corr, upsampled
