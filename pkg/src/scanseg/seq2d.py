"""2D <-> 1D conversion: sub-kernel tiling with raster serialization, plus the
pooled global-context pathway.

A feature map (B, C, H, W) is partitioned into non-overlapping m x n tiles;
pixels inside each tile are serialized row-major, and the tiles themselves
are ordered row-major over the tile grid, preserving local continuity. When
an extent is not divisible the map is zero-padded symmetrically to the next
multiple and a validity mask keeps padded positions out of pooling means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .autodiff import value_of


@dataclass(frozen=True)
class SerializationPlan:
    height: int
    width: int
    m: int
    n: int
    pad_top: int
    pad_bottom: int
    pad_left: int
    pad_right: int

    @property
    def padded_height(self):
        return self.height + self.pad_top + self.pad_bottom

    @property
    def padded_width(self):
        return self.width + self.pad_left + self.pad_right

    @property
    def grid(self):
        return self.padded_height // self.m, self.padded_width // self.n

    @property
    def n_subkernels(self):
        gh, gw = self.grid
        return gh * gw

    def valid_mask(self):
        """(G, m*n) mask of positions that map to real (unpadded) pixels."""
        mask2d = np.zeros((self.padded_height, self.padded_width))
        mask2d[self.pad_top:self.pad_top + self.height,
               self.pad_left:self.pad_left + self.width] = 1.0
        gh, gw = self.grid
        return (mask2d.reshape(gh, self.m, gw, self.n)
                .transpose(0, 2, 1, 3).reshape(gh * gw, self.m * self.n))


def make_plan(height, width, m, n, allow_pad=True) -> SerializationPlan:
    """Plan a tiling of an H x W map into m x n sub-kernels."""
    if m < 1 or n < 1:
        raise ValueError(f"sub-kernel extents must be >= 1, got {m}x{n}")
    rh = (-height) % m
    rw = (-width) % n
    if (rh or rw) and not allow_pad:
        raise T.ShapeError(
            f"extents {height}x{width} not divisible by sub-kernel {m}x{n} "
            "and padding is disabled")
    return SerializationPlan(height, width, m, n,
                             rh // 2, rh - rh // 2, rw // 2, rw - rw // 2)


def serialize(feature_map, plan: SerializationPlan):
    """(B, C, H, W) -> (B, G, m*n, C) tokens, bijective up to padding."""
    b, c, h, w = value_of(feature_map).shape
    if (h, w) != (plan.height, plan.width):
        raise T.ShapeError(
            f"map extents {h}x{w} do not match plan {plan.height}x{plan.width}")
    x = feature_map
    if plan.pad_top or plan.pad_bottom or plan.pad_left or plan.pad_right:
        x = ad.pad2d(x, plan.pad_top, plan.pad_bottom, plan.pad_left, plan.pad_right)
    gh, gw = plan.grid
    x = ad.reshape(x, (b, c, gh, plan.m, gw, plan.n))
    x = ad.transpose(x, (0, 2, 4, 3, 5, 1))
    return ad.reshape(x, (b, gh * gw, plan.m * plan.n, c))


def deserialize(tokens, plan: SerializationPlan):
    """Exact inverse of :func:`serialize`, cropping any padding."""
    b, g, mn, c = value_of(tokens).shape
    gh, gw = plan.grid
    if g != gh * gw or mn != plan.m * plan.n:
        raise T.ShapeError(
            f"token layout ({g},{mn}) inconsistent with plan grid {gh}x{gw}, "
            f"sub-kernel {plan.m}x{plan.n}")
    x = ad.reshape(tokens, (b, gh, gw, plan.m, plan.n, c))
    x = ad.transpose(x, (0, 5, 1, 3, 2, 4))
    x = ad.reshape(x, (b, c, plan.padded_height, plan.padded_width))
    if plan.pad_top or plan.pad_left or plan.pad_bottom or plan.pad_right:
        x = ad.slice2d(x, plan.pad_top, plan.height, plan.pad_left, plan.width)
    return x


def masked_mean_tokens(tokens, valid):
    """Mean over the within-sub-kernel axis, ignoring padded positions.

    tokens: (B, G, m*n, C); valid: (G, m*n) with at least one valid position
    per sub-kernel. Returns (B, G, C).
    """
    counts = valid.sum(axis=1)  # (G,)
    weights = (valid / counts[:, None])[None, :, :, None]
    return ad.sum_(ad.mul(tokens, weights), axis=2)


def pool_unpool_context(tokens, inner_fn, outer_fn, valid=None):
    """Local scan per sub-kernel plus a pooled global pathway.

    inner_fn maps (B*G, m*n, C) -> same (a full block with residual);
    outer_fn maps (B, G, C) -> additive context of the same shape (a block
    branch without residual). The context is broadcast-added to every
    position of its sub-kernel, so global information flows across
    sub-kernels only through the pooled tokens.
    """
    b, g, mn, c = value_of(tokens).shape
    flat = ad.reshape(tokens, (b * g, mn, c))
    inner = ad.reshape(inner_fn(flat), (b, g, mn, c))
    if valid is None:
        valid = np.ones((g, mn))
    pooled = masked_mean_tokens(inner, valid)       # (B,G,C)
    context = outer_fn(pooled)                      # (B,G,C)
    return ad.add(inner, ad.expand_dims(context, 2))
