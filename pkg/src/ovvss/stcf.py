"""Spatial-temporal context fusion.

Consecutive clip frames are fused pairwise and gradually: the running "past"
feature starts at the earliest frame's pooled features, and each later frame
attends into it, the attention output becoming the new past feature. Per-scale
affinity maps are refined coarse-to-fine before producing the fused target
feature, which an auxiliary 1x1 head supervises on seen classes.

For a clip of n+1 frames with per-level token count hw and width c, one clip
costs O(n * (hw * c^2 + hw^2 * c)) in the attention steps plus the
aggregation convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .encoders import FeaturePyramid


def flatten_map(x):
    """(B, C, H, W) -> (B, H*W, C)"""
    return x.flatten(2).transpose(1, 2)


def unflatten_map(x, hw):
    """(B, H*W, C) -> (B, C, H, W)"""
    h, w = hw
    return x.transpose(1, 2).reshape(x.shape[0], x.shape[2], h, w)


class TemporalProjector(nn.Module):
    """Per-scale Q/K/V projections for one fusion step: the query comes from
    the later frame's raw features, key and value from the running past
    feature. V keeps the level width so the attention output can serve as the
    next past feature; Q/K may use a separate attention width."""

    def __init__(self, channels, attn_dim=0):
        super().__init__()
        qk = attn_dim or channels
        self.qk_dim = qk
        self.q = nn.Linear(channels, qk)
        self.k = nn.Linear(channels, qk)
        self.v = nn.Linear(channels, channels)

    def forward(self, u_target, d_past):
        """u_target, d_past: (B, C, H, W) -> Q, K (B, HW, qk), V (B, HW, C)."""
        if u_target.shape[-2:] != d_past.shape[-2:]:
            raise ValueError(
                f"spatial mismatch {tuple(u_target.shape[-2:])} vs {tuple(d_past.shape[-2:])}"
            )
        return (
            self.q(flatten_map(u_target)),
            self.k(flatten_map(d_past)),
            self.v(flatten_map(d_past)),
        )


def pairwise_attention(q, k, v, raw=False):
    """Affinity between one frame and the running past feature.

    q, k: (B, HWq|HWk, d); v: (B, HWk, C). Returns the affinity map
    A (B, HWq, HWk) and the attended feature N = A @ v. By default A is
    row-softmaxed with 1/sqrt(d) scaling; ``raw`` keeps the bare product
    for ablation.
    """
    scores = q @ k.transpose(-2, -1)
    if raw:
        a = scores
    else:
        a = torch.softmax(scores / q.shape[-1] ** 0.5, dim=-1)
    return a, a @ v


def upsample_affinity(a, src_hw, dst_hw):
    """Bilinearly resample an affinity map over both of its spatial pairs.

    a: (B, hq*wq, hk*wk) laid out row-major over (src_hw x src_hw) grids;
    returns (B, Hq*Wq, Hk*Wk) on the dst_hw grids, pixel-center sampling.
    """
    b = a.shape[0]
    (hq, wq), (hk, wk) = src_hw, src_hw
    (Hq, Wq), (Hk, Wk) = dst_hw, dst_hw
    # key pair
    x = a.reshape(b * hq * wq, 1, hk, wk)
    x = F.interpolate(x, size=(Hk, Wk), mode="bilinear", align_corners=False)
    x = x.reshape(b, hq * wq, Hk * Wk)
    # query pair
    x = x.transpose(1, 2).reshape(b * Hk * Wk, 1, hq, wq)
    x = F.interpolate(x, size=(Hq, Wq), mode="bilinear", align_corners=False)
    x = x.reshape(b, Hk * Wk, Hq * Wq).transpose(1, 2)
    return x.contiguous()


class AffinityAggregator(nn.Module):
    """Coarse-to-fine refinement of per-scale affinity maps.

    The deepest map passes through unchanged; each shallower map adds the
    upsampled refinement from the level below, is convolved, rectified and
    row-renormalized so it stays a distribution over key positions.

    conv modes: "spatial" convolves each query's affinity row over the key
    grid with a small shared kernel (cheap, size-agnostic); "dense" mixes the
    flattened key dimension as channels with a 1x1 conv (the literal
    key-mixing form; quadratic in token count, kept for ablation).
    """

    def __init__(self, num_levels, kernel=3, mode="spatial", level_tokens=None):
        super().__init__()
        self.num_levels = num_levels
        self.mode = mode
        if mode == "spatial":
            convs = []
            for _ in range(max(num_levels - 1, 0)):
                c = nn.Conv2d(1, 1, kernel, padding=kernel // 2)
                with torch.no_grad():  # start as the identity refinement
                    c.weight.zero_()
                    c.weight[0, 0, kernel // 2, kernel // 2] = 1.0
                    c.bias.zero_()
                convs.append(c)
            self.convs = nn.ModuleList(convs)
        elif mode == "dense":
            if level_tokens is None:
                raise ValueError("dense mode needs per-level token counts")
            convs = []
            for tok in level_tokens[:-1]:
                c = nn.Conv2d(tok, tok, 1)
                with torch.no_grad():
                    c.weight.copy_(torch.eye(tok).view(tok, tok, 1, 1))
                    c.bias.zero_()
                convs.append(c)
            self.convs = nn.ModuleList(convs)
        else:
            raise ValueError(f"unknown affinity conv mode {mode!r}")

    def _conv(self, level, m, hw):
        b, nq, nk = m.shape
        if self.mode == "spatial":
            # one shared kernel over every query's key grid; grouped form is
            # far faster than a (b*nq, 1, h, w) batch on CPU
            conv = self.convs[level]
            k = conv.kernel_size[0]
            x = m.reshape(b, nq, *hw)
            y = F.conv2d(
                x, conv.weight.expand(nq, 1, k, k), conv.bias.expand(nq),
                padding=k // 2, groups=nq,
            )
            return y.reshape(b, nq, nk)
        h, w = hw
        x = m.transpose(1, 2).reshape(b, nk, h, w)  # keys as channels over the query grid
        return self.convs[level](x).reshape(b, nk, nq).transpose(1, 2)

    def forward(self, a_maps, level_hw):
        """a_maps: per-scale affinities shallow->deep, a_maps[l] of shape
        (B, HW_l, HW_l); level_hw: matching (H_l, W_l) list. Returns the
        refined maps, same layout."""
        if len(a_maps) != self.num_levels or len(level_hw) != self.num_levels:
            raise ValueError(
                f"expected {self.num_levels} scales, got {len(a_maps)} maps / {len(level_hw)} shapes"
            )
        refined = [None] * self.num_levels
        refined[-1] = a_maps[-1]
        for l in range(self.num_levels - 2, -1, -1):
            up = refined[l + 1]
            if level_hw[l + 1] != level_hw[l]:
                up = upsample_affinity(up, level_hw[l + 1], level_hw[l])
            m = F.relu(self._conv(l, up + a_maps[l], level_hw[l])) + 1e-12
            refined[l] = m / m.sum(dim=-1, keepdim=True)  # rows fully rectified
        return refined


class CrossScaleCollapse(nn.Module):
    """Merge per-scale fused maps into one decoder feature: project every
    scale to a common width, upsample to the finest scale, and sum."""

    def __init__(self, channels, out_dim):
        super().__init__()
        self.project = nn.ModuleList(nn.Conv2d(c, out_dim, 1) for c in channels)

    def forward(self, per_scale):
        target_hw = per_scale[0].shape[-2:]
        out = 0
        for proj, x in zip(self.project, per_scale):
            y = proj(x)
            if y.shape[-2:] != target_hw:
                y = F.interpolate(y, size=target_hw, mode="bilinear", align_corners=False)
            out = out + y
        return out


class AuxiliaryHead(nn.Module):
    """1x1 conv from the fused feature to seen-class logits, used only for
    the auxiliary training loss."""

    def __init__(self, dim, num_seen):
        super().__init__()
        if num_seen < 1:
            raise ValueError("need at least one seen class")
        self.head = nn.Conv2d(dim, num_seen, 1)

    def forward(self, o_t):
        return self.head(o_t)


@dataclass
class FusedClipOutput:
    per_scale: list  # (B, C_l, H_l, W_l) fused map per scale
    fused: torch.Tensor  # (B, out_dim, H_1, W_1)
    steps: int
    affinities: list = field(default_factory=list)  # final step, raw, per scale
    refined: list = field(default_factory=list)  # final step, aggregated, per scale


class ClipFuser(nn.Module):
    """Gradual pairwise fusion over a clip.

    The running past feature starts at the earliest frame's pooled features;
    each subsequent frame runs one attention step against it, ending with the
    target frame. The final step's refined affinities produce the per-scale
    fused maps, collapsed across scales to one feature for decoding.
    """

    def __init__(self, channels=(16, 32, 64, 128), out_dim=32, attn_dim=0,
                 raw_affinity=False, conv_kernel=3, affinity_conv="spatial",
                 level_tokens=None):
        super().__init__()
        self.channels = tuple(channels)
        self.raw_affinity = raw_affinity
        self.projectors = nn.ModuleList(
            TemporalProjector(c, attn_dim) for c in self.channels
        )
        self.aggregator = AffinityAggregator(
            len(self.channels), kernel=conv_kernel, mode=affinity_conv,
            level_tokens=level_tokens,
        )
        self.collapse = CrossScaleCollapse(self.channels, out_dim)

    def forward(self, pyramids, enhanced_first: FeaturePyramid) -> FusedClipOutput:
        """pyramids: raw per-frame FeaturePyramids in clip order (target last);
        enhanced_first: pooled features of the earliest frame (the target
        itself for a one-frame clip)."""
        if not pyramids:
            raise ValueError("empty clip")
        levels = len(self.channels)
        if any(len(p.levels) != levels for p in pyramids):
            raise ValueError("pyramid depth mismatch")
        level_hw = [tuple(lv.shape[-2:]) for lv in pyramids[0].levels]

        d_past = list(enhanced_first.levels)
        steps = 0
        a_final = b_final = v_final = None
        for f in range(1, len(pyramids)):
            a_maps, n_maps, v_maps = [], [], []
            for l in range(levels):
                q, k, v = self.projectors[l](pyramids[f].levels[l], d_past[l])
                a, n = pairwise_attention(q, k, v, raw=self.raw_affinity)
                a_maps.append(a)
                n_maps.append(n)
                v_maps.append(v)
            d_past = [unflatten_map(n, hw) for n, hw in zip(n_maps, level_hw)]
            a_final, v_final = a_maps, v_maps
            steps += 1
        if steps:
            # only the target step's refined affinities reach the output, so
            # aggregation runs once, after the loop
            b_final = self.aggregator(a_final, level_hw)

        if steps == 0:
            per_scale = d_past
        else:
            per_scale = [
                unflatten_map(b @ v, hw)
                for b, v, hw in zip(b_final, v_final, level_hw)
            ]
        return FusedClipOutput(
            per_scale=per_scale,
            fused=self.collapse(per_scale),
            steps=steps,
            affinities=a_final or [],
            refined=b_final or [],
        )
