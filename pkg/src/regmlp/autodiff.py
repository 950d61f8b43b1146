"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything learned in this package (MLP blocks, attention and convolution
baselines, the registration network) runs on the small tape-based engine in
this module.  Tensors wrap row-major numpy arrays; every differentiable
operation records a vector-Jacobian closure, and :func:`backward` replays the
tape in reverse topological order.

Design notes:
  * float64 is the canonical dtype so finite-difference gradient checks are
    reliable.
  * reductions and gathers delegate to numpy, whose summation order is fixed
    for a given input, so repeated runs are bit-identical.
  * gradient accumulation is additive; call ``zero_grad`` between steps.
  * by default every operation verifies its result is finite and raises
    ``NumericError`` otherwise; ``finite_checks(False)`` disables the scan
    in hot loops.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_CHECK_FINITE = True


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class NumericError(ArithmeticError):
    """An operation produced NaN or infinity."""


@contextmanager
def finite_checks(enabled):
    """Temporarily enable/disable per-operation finiteness verification."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    try:
        yield
    finally:
        _CHECK_FINITE = prev


def _check(arr, what="operation result"):
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


class Tensor:
    """A dense array plus optional gradient tape bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE, order="C")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        """Detached copy of the value."""
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


class Parameter(Tensor):
    """A named leaf tensor that always tracks gradients."""

    __slots__ = ("name",)

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _node(data, parents, vjp, what="operation result"):
    """Wrap an op result, recording tape info only if a parent tracks grads."""
    out = Tensor(_check(data, what))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), vjp, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), vjp, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(data, (a, b), vjp, "div")


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _node(data, (a,), vjp, "exp")


def sqrt(a):
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def vjp(g):
        return (g * (0.5 / data),)

    return _node(data, (a,), vjp, "sqrt")


def relu(a):
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _node(data, (a,), vjp, "relu")


def gelu(a):
    """Exact-erf GELU: x * Phi(x)."""
    a = as_tensor(a)
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    data = a.data * phi

    def vjp(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (phi + a.data * pdf),)

    return _node(data, (a,), vjp, "gelu")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(data, (a,), vjp, "sum")


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in ax]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects tensors of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(data, (a, b), vjp, "matmul")


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(data, (a,), vjp, "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _node(data, (a,), vjp, "transpose")


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _node(data, tuple(tensors), vjp, "concat")


def pad(a, pad_width):
    """Zero-pad; `pad_width` is a per-axis sequence of (low, high) pairs."""
    a = as_tensor(a)
    pw = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    data = np.pad(a.data, pw)
    inner = tuple(slice(lo, lo + n) for (lo, _), n in zip(pw, a.shape))

    def vjp(g):
        return (np.ascontiguousarray(g[inner]),)

    return _node(data, (a,), vjp, "pad")


def crop(a, slices):
    """Take a contiguous sub-block; `slices` is a per-axis (start, stop) list."""
    a = as_tensor(a)
    idx = tuple(slice(int(s), int(e)) for s, e in slices)
    data = np.ascontiguousarray(a.data[idx])

    def vjp(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return _node(data, (a,), vjp, "crop")


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _node(data, (a,), vjp, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.shape[-1] < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data

    def vjp(g):
        axes = tuple(range(x.ndim - 1))
        ggamma = (g * xhat).sum(axis=axes) if axes else (g * xhat)
        gbeta = g.sum(axis=axes) if axes else g
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        return gx, ggamma.reshape(gamma.shape), gbeta.reshape(beta.shape)

    return _node(data, (x, gamma, beta), vjp, "layer_norm")


# ---------------------------------------------------------------------------
# spatial primitives
# ---------------------------------------------------------------------------

def _offsets(radii):
    return list(itertools.product(*(range(-r, r + 1) for r in radii)))


def neighbor_stack(x, radii):
    """Stack zero-padded displaced copies of a feature map.

    `x` has shape [*spatial, C]; the result has shape [*spatial, K, C] with
    K = prod(2r+1) and displacement order lexicographic, zero offset at the
    center index.
    """
    x = as_tensor(x)
    spatial = x.shape[:-1]
    if len(radii) != len(spatial):
        raise ShapeError("one radius per spatial axis required")
    offs = _offsets(radii)
    padded = np.pad(x.data, [(r, r) for r in radii] + [(0, 0)])
    out = np.empty(spatial + (len(offs), x.shape[-1]), dtype=DTYPE)
    views = []
    for j, delta in enumerate(offs):
        sl = tuple(
            slice(r + d, r + d + n) for r, d, n in zip(radii, delta, spatial)
        )
        views.append(sl)
        out[..., j, :] = padded[sl]

    def vjp(g):
        gpad = np.zeros(padded.shape, dtype=DTYPE)
        for j, sl in enumerate(views):
            gpad[sl] += g[..., j, :]
        core = tuple(slice(r, r + n) for r, n in zip(radii, spatial))
        return (np.ascontiguousarray(gpad[core + (slice(None),)]),)

    return _node(out, (x,), vjp, "neighbor_stack")


def _box1d(arr, axis, r):
    """Centered window sum of half-width r along one axis, zero padded."""
    if r == 0:
        return arr
    n = arr.shape[axis]
    cs = np.cumsum(arr, axis=axis)
    hi = np.clip(np.arange(n) + r, 0, n - 1)
    out = np.take(cs, hi, axis=axis)
    lo = np.arange(n) - r - 1
    valid = lo >= 0
    low = np.take(cs, np.clip(lo, 0, n - 1), axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = n
    out -= low * valid.reshape(shape)
    return out


def box_filter(x, radii):
    """Window sum over all axes: out(p) = sum_{|d|<=r} x(p+d), zero padded."""
    x = as_tensor(x)
    if len(radii) != x.ndim:
        raise ShapeError("one radius per axis required")
    data = x.data
    for ax, r in enumerate(radii):
        data = _box1d(data, ax, r)

    def vjp(g):
        out = g
        for ax, r in enumerate(radii):
            out = _box1d(out, ax, r)
        return (out,)

    return _node(data, (x,), vjp, "box_filter")


def _multilinear(source, coords, raw):
    """Shared multilinear-interpolation core.

    source:  [*spatial, C] array
    coords:  list of D arrays of sampling coordinates (already clamped)
    raw:     list of D arrays of coordinates before clamping (for masking)
    Returns (out, cache) where cache holds what the adjoints need.
    """
    spatial = source.shape[:-1]
    D = len(coords)
    f0 = [np.floor(c) for c in coords]
    frac = [c - f for c, f in zip(coords, f0)]
    base = [f.astype(np.intp) for f in f0]
    corners = []
    out = np.zeros(coords[0].shape + (source.shape[-1],), dtype=DTYPE)
    for corner in itertools.product((0, 1), repeat=D):
        idx = tuple(
            np.clip(b + c, 0, n - 1) for b, c, n in zip(base, corner, spatial)
        )
        w = np.ones_like(coords[0])
        for a in range(D):
            w = w * (frac[a] if corner[a] else 1.0 - frac[a])
        vals = source[idx]
        out += w[..., None] * vals
        corners.append((corner, idx, w, vals))
    inside = [
        (r >= 0) & (r <= n - 1) for r, n in zip(raw, spatial)
    ]
    return out, (corners, frac, inside, spatial, D)


def warp_linear(source, field):
    """Pull-based warp: out(p) = interp(source, p + field(p)), edge clamped.

    source: [*spatial, C] tensor; field: [*spatial, D] tensor of voxel-unit
    displacements.  Differentiable in both arguments.
    """
    source, field = as_tensor(source), as_tensor(field)
    spatial = source.shape[:-1]
    D = len(spatial)
    if field.shape != spatial + (D,):
        raise ShapeError(
            f"field shape {field.shape} does not match source spatial {spatial}"
        )
    grids = np.meshgrid(*(np.arange(n, dtype=DTYPE) for n in spatial), indexing="ij")
    raw = [g + field.data[..., a] for a, g in enumerate(grids)]
    coords = [np.clip(r, 0.0, n - 1.0) for r, n in zip(raw, spatial)]
    out, cache = _multilinear(source.data, coords, raw)
    corners, frac, inside, _, _ = cache

    def vjp(g):
        gsrc = np.zeros(source.shape, dtype=DTYPE)
        gfield = np.zeros(field.shape, dtype=DTYPE)
        for corner, idx, w, vals in corners:
            np.add.at(gsrc, idx, w[..., None] * g)
            dot = (vals * g).sum(axis=-1)
            for a in range(D):
                dw = np.ones_like(w)
                for b in range(D):
                    if b == a:
                        dw = dw * (1.0 if corner[a] else -1.0)
                    else:
                        dw = dw * (frac[b] if corner[b] else 1.0 - frac[b])
                gfield[..., a] += dw * dot * inside[a]
        return gsrc, gfield

    return _node(out, (source, field), vjp, "warp_linear")


def resize_linear(x, out_shape):
    """Resample a feature map to `out_shape` with half-pixel-centered linear
    interpolation (edge clamped); differentiable in `x`."""
    x = as_tensor(x)
    spatial = x.shape[:-1]
    if len(out_shape) != len(spatial):
        raise ShapeError("rank change in resize_linear")
    axes_coords = []
    for n_in, n_out in zip(spatial, out_shape):
        c = (np.arange(n_out, dtype=DTYPE) + 0.5) * (n_in / n_out) - 0.5
        axes_coords.append(np.clip(c, 0.0, n_in - 1.0))
    grids = np.meshgrid(*axes_coords, indexing="ij")
    out, cache = _multilinear(x.data, grids, grids)
    corners = cache[0]

    def vjp(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        for _, idx, w, _ in corners:
            np.add.at(gx, idx, w[..., None] * g)
        return (gx,)

    return _node(out, (x,), vjp, "resize_linear")


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(loss):
    """Propagate d(loss)/d(tensor) into `.grad` of every tracked tensor.

    Accumulates additively across calls; `loss` must be a tracked scalar.
    """
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        raise ShapeError("backward expects a scalar tensor")
    if not loss.requires_grad:
        raise ValueError("loss is not tracked by the tape")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones((), dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            node.grad = node.grad + g
        if node._vjp is None:
            continue
        parts = node._vjp(g)
        for parent, pg in zip(node._parents, parts):
            if not parent.requires_grad or pg is None:
                continue
            _check(pg, "gradient")
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def zero_grad(params):
    for p in params:
        p.zero_grad()


def grad_check(fn, point, step=1e-5):
    """Max relative error between tape gradients and central differences.

    `fn` maps one tensor to a scalar tensor.  Returns
    max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = Tensor(np.array(point.data if isinstance(point, Tensor) else point,
                        dtype=DTYPE, copy=True), requires_grad=True)
    out = fn(x)
    if out.data.ndim != 0:
        raise ShapeError("grad_check requires a scalar-valued function")
    backward(out)
    analytic = x.grad.copy()

    numeric = np.empty_like(analytic)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(Tensor(x.data)).item()
        flat[i] = orig - step
        lo = fn(Tensor(x.data)).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * step)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise NumericError("non-finite values during gradient check")
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
