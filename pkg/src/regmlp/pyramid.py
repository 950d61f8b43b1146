"""Hierarchical feature pyramid encoder.

Level 0 is a pointwise channel lift of the raw image processed by the
first-stage blocks at full resolution; each later level halves every extent
with patch merging (non-overlapping 2^D concatenation + linear) before its
own blocks.  The stride-4 variant replaces levels 0 and 1 with a single 4^D
patch embedding, so the pyramid starts at a quarter of the input resolution
with the coarsest extents unchanged.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, matmul, pad, reshape, transpose
from .blocks import BlockKind, MixBlock
from .module import Linear, Module
from .windows import WindowSpec


def _patch_fold(x, factor):
    """Group non-overlapping factor^D patches into channels.

    [*S, C] -> [*ceil(S/factor), factor^D * C]; odd extents are zero-padded
    on the high side first.
    """
    spatial = x.shape[:-1]
    rank = len(spatial)
    pads = [((-n) % factor) for n in spatial]
    if any(pads):
        x = pad(x, [(0, p) for p in pads] + [(0, 0)])
    padded = tuple(n + p for n, p in zip(spatial, pads))
    grid = tuple(n // factor for n in padded)
    split = []
    for g in grid:
        split.extend([g, factor])
    split.append(x.shape[-1])
    x = reshape(x, tuple(split))
    perm = (
        tuple(2 * i for i in range(rank))
        + tuple(2 * i + 1 for i in range(rank))
        + (2 * rank,)
    )
    x = transpose(x, perm)
    return reshape(x, grid + (factor**rank * x.shape[-1],))


class PatchMerge(Module):
    """2x downsampling: 2^D patch concatenation followed by a linear lift."""

    def __init__(self, rank, c_in, c_out, rng):
        super().__init__()
        self.lin = self.child("lin", Linear((2**rank) * c_in, c_out, rng))

    def __call__(self, x):
        return self.lin(_patch_fold(x, 2))


class PatchEmbed(Module):
    """Strided patch embedding of the raw image (the stride-4 arm)."""

    def __init__(self, rank, factor, c_out, rng):
        super().__init__()
        self.factor = factor
        self.lin = self.child("lin", Linear(factor**rank, c_out, rng))

    def __call__(self, x):
        return self.lin(_patch_fold(x, self.factor))


class PyramidEncoder(Module):
    """Shared-weight feature pyramid over one image.

    widths are per-level channel counts (non-decreasing); `first_stage` is
    the level-0 block kind and `stage_kinds[l]` the kind at level l >= 1.
    With `stride4` the encoder embeds 4^D patches directly to level 2.
    """

    def __init__(
        self,
        depth,
        widths,
        rank,
        rng,
        first_stage=BlockKind.WINDOW_MIXER_MLP,
        stage_kinds=None,
        window_spec=None,
        blocks_per_level=1,
        stride4=False,
    ):
        super().__init__()
        if depth < 2:
            raise ValueError("pyramid depth must be >= 2")
        if len(widths) != depth:
            raise ValueError(f"need {depth} widths, got {len(widths)}")
        if any(b > a for a, b in zip(widths[1:], widths)):
            raise ValueError(f"widths must be non-decreasing, got {widths}")
        if stride4 and depth < 3:
            raise ValueError("stride-4 start needs depth >= 3")
        spec = window_spec or WindowSpec()
        kinds = list(stage_kinds or [BlockKind.WINDOW_MIXER_MLP] * depth)
        if len(kinds) != depth:
            raise ValueError(f"need {depth} stage kinds, got {len(kinds)}")
        kinds[0] = first_stage

        self.depth = depth
        self.widths = tuple(widths)
        self.rank = rank
        self.stride4 = stride4
        self.start_level = 2 if stride4 else 0
        self.levels = []

        if stride4:
            self.embed = self.child("embed", PatchEmbed(rank, 4, widths[2], rng))
        else:
            self.lift = self.child("lift", Linear(1, widths[0], rng))

        for lvl in range(self.start_level, depth):
            stage = {}
            if lvl > self.start_level:
                stage["merge"] = self.child(
                    f"merge{lvl}", PatchMerge(rank, widths[lvl - 1], widths[lvl], rng)
                )
            stage["blocks"] = [
                self.child(
                    f"level{lvl}.block{i}",
                    MixBlock(
                        kinds[lvl],
                        widths[lvl],
                        rank,
                        rng,
                        window_spec=spec,
                        block_index=i,
                    ),
                )
                for i in range(blocks_per_level)
            ]
            self.levels.append(stage)

    def min_extent(self):
        return 2 ** (self.depth - 1)

    def __call__(self, image):
        """image: [*spatial] or [*spatial, 1] tensor; returns per-level
        feature tensors, finest first (stride-4 pyramids start at level 2)."""
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.ndim == self.rank:
            x = reshape(x, x.shape + (1,))
        if x.ndim != self.rank + 1 or x.shape[-1] != 1:
            raise ShapeError(f"expected a rank-{self.rank} single-channel image")
        if any(n < self.min_extent() for n in x.shape[:-1]):
            raise ShapeError(
                f"image extents {x.shape[:-1]} too small for depth {self.depth}"
            )

        x = self.embed(x) if self.stride4 else self.lift(x)
        feats = []
        for i, stage in enumerate(self.levels):
            if i > 0:
                x = stage["merge"](x)
            for block in stage["blocks"]:
                x = block(x)
            feats.append(x)
        return feats
