"""Random frame enhancement.

The temporally distant frame is summarized into a handful of soft region
vectors (pixel-softmax-weighted feature means) and injected into the fused
target feature with multi-head cross-attention plus a residual connection.
Feeding one distilled frame instead of the whole video keeps the cost at
O(hw * c^2 + hw * K * c) per clip for K regions.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .attention import MultiheadCrossAttention
from .encoders import FeaturePyramid
from .stcf import flatten_map, unflatten_map


class RandomPyramidCollapse(nn.Module):
    """Merge the random frame's multi-scale features into one flat feature
    map: levels from ``min_level`` up are resampled to the finest selected
    level, channel-concatenated and linearly projected to the shared width."""

    def __init__(self, channels=(16, 32, 64, 128), dim=32, min_level=2):
        super().__init__()
        if not 1 <= min_level <= len(channels):
            raise ValueError(f"min_level {min_level} out of range")
        self.min_level = min_level
        self.project = nn.Conv2d(sum(channels[min_level - 1:]), dim, 1)

    def forward(self, pyramid: FeaturePyramid):
        """-> (B, dim, H, W) at the min_level resolution."""
        selected = pyramid.levels[self.min_level - 1:]
        hw = selected[0].shape[-2:]
        stacked = [selected[0]]
        for lv in selected[1:]:
            stacked.append(F.interpolate(lv, size=hw, mode="bilinear", align_corners=False))
        return self.project(torch.cat(stacked, dim=1))


class RegionPooler(nn.Module):
    """Soft region extraction: a 1x1 conv scores each pixel against K regions,
    scores are softmaxed over the pixel axis, and each region vector is the
    resulting convex combination of pixel features."""

    def __init__(self, dim, regions):
        super().__init__()
        if regions < 1:
            raise ValueError("need at least one region")
        self.regions = regions
        self.score = nn.Conv2d(dim, regions, 1)

    def forward(self, d, need_weights=False):
        """d: (B, C, H, W) -> region matrix (B, K, C)."""
        logits = self.score(d).flatten(2)  # (B, K, HW)
        weights = torch.softmax(logits, dim=-1)  # over pixels, per region
        regions = weights @ flatten_map(d)  # (B, K, C)
        if need_weights:
            return regions, weights
        return regions


class TargetEnhancer(nn.Module):
    """Cross-attention from the fused target feature into the region vectors,
    with an optional residual connection (on by default; removable to match
    the bare attention form)."""

    def __init__(self, dim, heads=4, residual=True):
        super().__init__()
        self.residual = residual
        self.attn = MultiheadCrossAttention(dim, heads=heads)

    def forward(self, o_t, regions):
        """o_t: (B, C, H, W); regions: (B, K, C) -> (B, C, H, W)."""
        hw = o_t.shape[-2:]
        tokens = flatten_map(o_t)
        out = self.attn(tokens, regions)
        if self.residual:
            out = tokens + out
        return unflatten_map(out, hw)


class RandomFrameEnhancer(nn.Module):
    """Full random-frame path: collapse the random frame's pyramid, pool it
    into region context, and enhance the fused target feature with it."""

    def __init__(self, channels=(16, 32, 64, 128), dim=32, regions=8, heads=4,
                 residual=True, min_level=2):
        super().__init__()
        self.collapse = RandomPyramidCollapse(channels, dim, min_level)
        self.pool = RegionPooler(dim, regions)
        self.enhance = TargetEnhancer(dim, heads=heads, residual=residual)

    def forward(self, o_t, random_pyramid: FeaturePyramid):
        d_random = self.collapse(random_pyramid)
        regions = self.pool(d_random)
        return self.enhance(o_t, regions)
