"""Residual mixing blocks: multi-window MLP token mixing plus attention and
convolution baselines.

Every block follows the same wiring so swapping kinds changes no shapes:

  1. channel-concatenate the feature map with optional correlation and
     context signals, project to the block width, layer-norm;
  2. kind-specific spatial mixing (the only part that differs);
  3. zero-initialized fuse projection, residual add of the input;
  4. layer-norm + channel MLP (hidden 2C, zero-initialized output), residual.

The zero-initialized projections make every fresh block an exact identity on
its feature input, so untrained networks pass features (and fields) through
unchanged.  Window-mixing weights are shared across windows and channels, so
parameter counts are independent of resolution.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .autodiff import Tensor, concat, crop, gelu, matmul, pad, reshape, softmax, transpose
from .module import ChannelMlp, LayerNorm, Linear, Module
from .windows import WindowSpec, window_merge, window_partition


class BlockKind(Enum):
    CMW_MLP = "cmw_mlp"
    WINDOW_MIXER_MLP = "window_mixer_mlp"
    SHIFT_MLP = "shift_mlp"
    WINDOW_ATTENTION = "window_attention"
    GLOBAL_ATTENTION = "global_attention"
    CONV = "conv"

    @classmethod
    def parse(cls, name):
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown block kind {name!r}; expected one of {valid}")


MLP_KINDS = (BlockKind.CMW_MLP, BlockKind.WINDOW_MIXER_MLP, BlockKind.SHIFT_MLP)


def middle_window(spec: WindowSpec) -> int:
    """Single-window kinds use the middle entry of the window list."""
    return spec.sizes[len(spec.sizes) // 2]


class TokenMixMlp(Module):
    """Two-layer perceptron across positions within a window, one shared
    T x T weight pair applied per channel."""

    def __init__(self, volume, rng):
        super().__init__()
        s = 1.0 / np.sqrt(volume)
        self.w1 = self.param("w1", rng.normal(0.0, s, (volume, volume)))
        self.b1 = self.param("b1", np.zeros(volume))
        self.w2 = self.param("w2", rng.normal(0.0, s, (volume, volume)))
        self.b2 = self.param("b2", np.zeros(volume))

    def __call__(self, windows):
        x = transpose(windows, (0, 2, 1))  # [W, C, T]
        h = gelu(matmul(x, self.w1) + self.b1)
        y = matmul(h, self.w2) + self.b2
        return transpose(y, (0, 2, 1))


class _WindowMixBranch(Module):
    """partition -> token mix -> merge at one window size."""

    def __init__(self, size, rank, rng, shifted):
        super().__init__()
        self.size = size
        self.shift = (size // 2) if shifted else 0
        self.mix = self.child("mix", TokenMixMlp(size**rank, rng))

    def __call__(self, h):
        windows, meta = window_partition(h, self.size, origin_shift=self.shift)
        return window_merge(self.mix(windows), meta)


class _ShiftMix(Module):
    """Axis-shifted channel-split mixing: channel groups are displaced by
    one voxel along alternating axes, then a pointwise layer mixes them."""

    def __init__(self, channels, rank, rng):
        super().__init__()
        self.rank = rank
        self.groups = np.array_split(np.arange(channels), 2 * rank + 1)
        self.lin = self.child("lin", Linear(channels, channels, rng))

    def _shift(self, h, axis, step):
        spatial = h.shape[:-1]
        pads = [(0, 0)] * (len(spatial) + 1)
        bounds = [(0, n) for n in spatial] + [(0, h.shape[-1])]
        if step > 0:
            pads[axis] = (0, 1)
            bounds[axis] = (1, spatial[axis] + 1)
        else:
            pads[axis] = (1, 0)
            bounds[axis] = (0, spatial[axis])
        return crop(pad(h, pads), bounds)

    def __call__(self, h):
        c0 = 0
        parts = []
        for gi, group in enumerate(self.groups):
            n = len(group)
            piece = crop(
                h,
                [(0, s) for s in h.shape[:-1]] + [(c0, c0 + n)],
            )
            c0 += n
            if gi > 0 and n > 0:
                axis = (gi - 1) // 2
                step = 1 if (gi - 1) % 2 == 0 else -1
                piece = self._shift(piece, axis, step)
            parts.append(piece)
        shifted = concat(parts, axis=-1)
        return gelu(self.lin(shifted))


class _Attention(Module):
    """Multi-head self-attention within windows (or globally)."""

    def __init__(self, channels, heads, rng, window=None):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = channels // heads
        self.window = window  # None -> global
        self.q = self.child("q", Linear(channels, channels, rng))
        self.k = self.child("k", Linear(channels, channels, rng))
        self.v = self.child("v", Linear(channels, channels, rng))

    def _msa(self, tokens):
        # tokens [W, T, C] -> [W, T, C]
        w, t, c = tokens.shape
        q = reshape(self.q(tokens), (w, t, self.heads, self.head_dim))
        k = reshape(self.k(tokens), (w, t, self.heads, self.head_dim))
        v = reshape(self.v(tokens), (w, t, self.heads, self.head_dim))
        q = transpose(q, (0, 2, 1, 3))  # [W, H, T, d]
        k = transpose(k, (0, 2, 3, 1))  # [W, H, d, T]
        v = transpose(v, (0, 2, 1, 3))
        scores = matmul(q, k) * (1.0 / np.sqrt(self.head_dim))
        att = softmax(scores, axis=-1)
        out = matmul(att, v)  # [W, H, T, d]
        out = transpose(out, (0, 2, 1, 3))
        return reshape(out, (w, t, c))

    def __call__(self, h):
        spatial = h.shape[:-1]
        if self.window is None:
            tokens = reshape(h, (1, int(np.prod(spatial)), h.shape[-1]))
            mixed = self._msa(tokens)
            return reshape(mixed, h.shape)
        windows, meta = window_partition(h, self.window)
        return window_merge(self._msa(windows), meta)


class _ConvMix(Module):
    """Same-padded cross-correlation with a learned kernel, then GELU."""

    def __init__(self, channels, kernel, rank, rng):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("kernel extent must be odd")
        self.kernel = kernel
        self.rank = rank
        k_vol = kernel**rank
        s = 1.0 / np.sqrt(k_vol * channels)
        self.w = self.param("w", rng.normal(0.0, s, (k_vol * channels, channels)))
        self.b = self.param("b", np.zeros(channels))

    def __call__(self, h):
        from .autodiff import neighbor_stack

        r = self.kernel // 2
        patches = neighbor_stack(h, (r,) * self.rank)  # [*S, K, C]
        flat = reshape(patches, h.shape[:-1] + (patches.shape[-2] * h.shape[-1],))
        return gelu(matmul(flat, self.w) + self.b)


class MixBlock(Module):
    """One residual block; see module docstring for the shared wiring."""

    def __init__(
        self,
        kind,
        channels,
        rank,
        rng,
        window_spec=None,
        extra_channels=0,
        heads=4,
        kernel=3,
        block_index=0,
    ):
        super().__init__()
        spec = window_spec or WindowSpec()
        self.kind = kind
        self.channels = channels
        self.rank = rank
        shifted = spec.shift_alternation and (block_index % 2 == 1)

        self.in_proj = self.child(
            "in_proj", Linear(channels + extra_channels, channels, rng)
        )
        self.norm1 = self.child("norm1", LayerNorm(channels))

        if kind == BlockKind.CMW_MLP:
            self.branches = [
                self.child(f"win{s}", _WindowMixBranch(s, rank, rng, shifted))
                for s in spec.sizes
            ]
            fuse_in = channels * len(spec.sizes)
        elif kind == BlockKind.WINDOW_MIXER_MLP:
            self.branches = [
                self.child(
                    "win", _WindowMixBranch(middle_window(spec), rank, rng, shifted)
                )
            ]
            fuse_in = channels
        elif kind == BlockKind.SHIFT_MLP:
            self.branches = [self.child("shift", _ShiftMix(channels, rank, rng))]
            fuse_in = channels
        elif kind == BlockKind.WINDOW_ATTENTION:
            self.branches = [
                self.child(
                    "attn",
                    _Attention(channels, heads, rng, window=middle_window(spec)),
                )
            ]
            fuse_in = channels
        elif kind == BlockKind.GLOBAL_ATTENTION:
            self.branches = [
                self.child("attn", _Attention(channels, heads, rng, window=None))
            ]
            fuse_in = channels
        elif kind == BlockKind.CONV:
            self.branches = [self.child("conv", _ConvMix(channels, kernel, rank, rng))]
            fuse_in = channels
        else:
            raise ValueError(f"unsupported block kind {kind}")

        self.fuse = self.child("fuse", Linear(fuse_in, channels, rng, zero_init=True))
        self.norm2 = self.child("norm2", LayerNorm(channels))
        self.chan_mlp = self.child("chan_mlp", ChannelMlp(channels, 2 * channels, rng))

    def __call__(self, f, corr=None, context=None):
        parts = [f]
        if corr is not None:
            parts.append(corr)
        if context is not None:
            parts.append(context)
        x = concat(parts, axis=-1) if len(parts) > 1 else f
        h = self.norm1(self.in_proj(x))
        mixed = [branch(h) for branch in self.branches]
        stacked = concat(mixed, axis=-1) if len(mixed) > 1 else mixed[0]
        out = f + self.fuse(stacked)
        return out + self.chan_mlp(self.norm2(out))
