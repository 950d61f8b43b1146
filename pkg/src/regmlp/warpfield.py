"""Displacement-field algebra: warping, composition, upsampling, affine
conversion, and the folding diagnostic.

Conventions used throughout the package:
  * volumes are [*spatial] float arrays, label maps [*spatial] integer arrays,
    displacement fields [*spatial, D] arrays in voxel units;
  * warps are pull-based: warped(p) = source(p + u(p));
  * sampling coordinates are clamped to the valid domain (edge clamp).

Functions accept either numpy arrays or autodiff tensors; tensors keep the
operation on the gradient tape.
"""

from __future__ import annotations

import numpy as np

from .autodiff import DTYPE, ShapeError, Tensor, mul, resize_linear, warp_linear


class AffineTransform:
    """Linear map plus translation, applied about the volume center.

    The induced displacement is u(p) = M (p - c) + c + t - p for center
    voxel c, so matrix = I, translation = 0 gives the zero field.
    """

    def __init__(self, matrix, translation):
        self.matrix = np.asarray(matrix, dtype=DTYPE)
        self.translation = np.asarray(translation, dtype=DTYPE)
        d = self.translation.shape[0]
        if self.matrix.shape != (d, d):
            raise ShapeError("matrix and translation ranks differ")

    @property
    def rank(self):
        return self.translation.shape[0]

    def require_invertible(self, tol=1e-8):
        if abs(np.linalg.det(self.matrix)) <= tol:
            raise np.linalg.LinAlgError("affine matrix is numerically singular")
        return self

    @classmethod
    def identity(cls, rank):
        return cls(np.eye(rank), np.zeros(rank))


def _as_feature(x):
    """View a volume/feature array or tensor as a [*spatial, C] tensor."""
    if isinstance(x, Tensor):
        return x, True
    arr = np.asarray(x, dtype=DTYPE)
    return Tensor(arr), False


def warp(source, field, interpolation="linear"):
    """Warp a volume ([*S]), feature map ([*S, C]) or label map by `field`.

    Linear interpolation runs on the autodiff tape and is differentiable in
    both arguments; nearest interpolation is for label maps and returns an
    integer array.
    """
    if interpolation == "nearest":
        return warp_nearest(source, field)
    if interpolation != "linear":
        raise ValueError(f"unknown interpolation {interpolation!r}")

    field_t, field_was_tensor = _as_feature(field)
    src_t, src_was_tensor = _as_feature(source)
    d = field_t.shape[-1]
    spatial = field_t.shape[:-1]
    scalar_input = src_t.ndim == len(spatial)
    if scalar_input and src_t.shape != spatial:
        raise ShapeError(f"source spatial {src_t.shape} vs field spatial {spatial}")
    if scalar_input:
        src_t = src_t.reshape(spatial + (1,))
    if src_t.shape[:-1] != spatial:
        raise ShapeError(
            f"source spatial {src_t.shape[:-1]} vs field spatial {spatial}"
        )
    if len(spatial) != d:
        raise ShapeError("field component count must equal spatial rank")
    out = warp_linear(src_t, field_t)
    if scalar_input:
        out = out.reshape(spatial)
    if src_was_tensor or field_was_tensor:
        return out
    return out.data


def warp_nearest(labels, field):
    """Nearest-neighbor pull warp for integer label maps (not differentiable)."""
    lab = np.asarray(labels)
    fld = field.data if isinstance(field, Tensor) else np.asarray(field, dtype=DTYPE)
    spatial = lab.shape
    d = len(spatial)
    if fld.shape != spatial + (d,):
        raise ShapeError(f"field shape {fld.shape} vs labels {spatial}")
    idx = []
    for a, n in enumerate(spatial):
        grid = np.arange(n, dtype=DTYPE).reshape(
            [n if b == a else 1 for b in range(d)]
        )
        coord = np.rint(grid + fld[..., a])
        idx.append(np.clip(coord, 0, n - 1).astype(np.intp))
    return lab[tuple(idx)]


def compose(outer, inner):
    """Field composition: result(p) = inner(p) + outer(p + inner(p)).

    Warping by the result is equivalent (up to interpolation error) to
    warping by `inner` first and `outer` second, i.e. the coordinate map of
    the result is phi_outer o phi_inner.
    """
    outer_t, outer_was = _as_feature(outer)
    inner_t, inner_was = _as_feature(inner)
    if outer_t.shape != inner_t.shape:
        raise ShapeError(f"field shapes differ: {outer_t.shape} vs {inner_t.shape}")
    sampled = warp_linear(outer_t, inner_t)
    out = inner_t + sampled
    if outer_was or inner_was:
        return out
    return out.data


def upsample_field(field, factor=2):
    """Double each spatial extent by linear interpolation and rescale the
    displacement vectors into the finer voxel units."""
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    field_t, was_tensor = _as_feature(field)
    new_shape = tuple(2 * n for n in field_t.shape[:-1])
    out = mul(resize_linear(field_t, new_shape), 2.0)
    return out if was_tensor else out.data


def affine_to_field(transform, shape):
    """Materialize an affine transform as a displacement field on `shape`."""
    d = transform.rank
    if len(shape) != d:
        raise ShapeError("shape rank does not match transform rank")
    center = (np.asarray(shape, dtype=DTYPE) - 1.0) / 2.0
    grids = np.meshgrid(*(np.arange(n, dtype=DTYPE) for n in shape), indexing="ij")
    pts = np.stack(grids, axis=-1) - center
    moved = pts @ transform.matrix.T + center + transform.translation
    return moved - (pts + center)


def centered_coordinates(shape):
    """Flattened center-relative voxel coordinates, shape [prod(S), D].

    Used by the learned affine head: a delta matrix A and translation b give
    the displacement field (P_centered @ A^T + b) reshaped to [*S, D].
    """
    d = len(shape)
    center = (np.asarray(shape, dtype=DTYPE) - 1.0) / 2.0
    grids = np.meshgrid(*(np.arange(n, dtype=DTYPE) for n in shape), indexing="ij")
    pts = np.stack(grids, axis=-1) - center
    return pts.reshape(-1, d)


def jacobian_nonpositive_fraction(field):
    """Fraction of interior voxels whose deformation Jacobian determinant
    (central differences of p + u(p)) is non-positive."""
    fld = field.data if isinstance(field, Tensor) else np.asarray(field, dtype=DTYPE)
    spatial = fld.shape[:-1]
    d = fld.shape[-1]
    if len(spatial) != d:
        raise ShapeError("field component count must equal spatial rank")
    if any(n < 3 for n in spatial):
        raise ShapeError("need at least 3 voxels per axis for central differences")
    interior = tuple(slice(1, n - 1) for n in spatial)
    jac = np.empty(tuple(n - 2 for n in spatial) + (d, d), dtype=DTYPE)
    for i in range(d):  # component
        for j in range(d):  # derivative axis
            hi = list(interior)
            lo = list(interior)
            hi[j] = slice(2, spatial[j])
            lo[j] = slice(0, spatial[j] - 2)
            dij = (fld[tuple(hi) + (i,)] - fld[tuple(lo) + (i,)]) / 2.0
            jac[..., i, j] = dij + (1.0 if i == j else 0.0)
    dets = np.linalg.det(jac)
    return float(np.mean(dets <= 0.0))
