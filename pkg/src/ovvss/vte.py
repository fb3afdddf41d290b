"""Text-guided cost-volume decoding.

Class-name embeddings are refined with visual context, correlated against
dense visual features into a cosine cost volume, enriched with positional
features from the shallowest backbone level, and decoded per class with
shared weights. Nothing in this path mixes information across classes, so the
number of presented classes is free at inference: a model trained against the
seen classes accepts any vocabulary given as text. Text refinement costs
O(N * hw * c) attention per frame set; everything after the cost volume is
linear in N.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .attention import MultiheadCrossAttention


class TextRefiner(nn.Module):
    """Refine per-class text features with visual tokens.

    mode "mhsa": F + attn(F, visual); "mhsa+ffn" adds a per-row feed-forward
    block on top; "off" passes the text features through unchanged. Each class
    row only attends to visual tokens, never to other rows, preserving
    per-class independence.
    """

    def __init__(self, dim, heads=4, mode="mhsa+ffn"):
        super().__init__()
        if mode not in ("off", "mhsa", "mhsa+ffn"):
            raise ValueError(f"unknown text refinement mode {mode!r}")
        self.mode = mode
        if mode != "off":
            self.attn = MultiheadCrossAttention(dim, heads=heads)
        if mode == "mhsa+ffn":
            self.ffn = nn.Sequential(
                nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
            )
            nn.init.zeros_(self.ffn[-1].weight)
            nn.init.zeros_(self.ffn[-1].bias)

    def forward(self, text, visual_tokens):
        """text: (B, N, C) or (N, C); visual_tokens: (B, HW, C)."""
        if self.mode == "off":
            return text
        squeeze = text.ndim == 2
        if squeeze:
            text = text.unsqueeze(0).expand(visual_tokens.shape[0], -1, -1)
        out = text + self.attn(text, visual_tokens)
        if self.mode == "mhsa+ffn":
            out = out + self.ffn(out)
        return out.squeeze(0) if squeeze and out.shape[0] == 1 else out


def build_cost_volume(text, visual, eps=1e-8):
    """Cosine similarity between every class row and every dense pixel.

    text: (B, N, C) or (N, C); visual: (B, C, H, W).
    Returns (X (B, N, H, W), zero_norm_count). Zero-norm rows or pixels get
    similarity 0; the count reports how many were guarded.
    """
    if text.ndim == 2:
        text = text.unsqueeze(0).expand(visual.shape[0], -1, -1)
    if text.shape[-1] != visual.shape[1]:
        raise ValueError(
            f"channel mismatch: text {text.shape[-1]} vs visual {visual.shape[1]}"
        )
    t_norm = text.norm(dim=-1, keepdim=True)
    v_norm = visual.norm(dim=1, keepdim=True)
    zero_norm = int((t_norm < eps).sum()) + int((v_norm < eps).sum())
    t_hat = text / t_norm.clamp_min(eps)
    v_hat = visual / v_norm.clamp_min(eps)
    x = torch.einsum("bnc,bchw->bnhw", t_hat, v_hat)
    return x, zero_norm


class CostVolumeRefiner(nn.Module):
    """Shared 3x3 convolution stack applied to each class slice independently
    (1 channel in, 1 channel out), so the class count stays free."""

    def __init__(self, hidden=8, depth=2, kernel=3):
        super().__init__()
        widths = [1] + [hidden] * (depth - 1) + [1]
        layers = []
        for i in range(depth):
            if i:
                layers.append(nn.GELU())
            layers.append(nn.Conv2d(widths[i], widths[i + 1], kernel, padding=kernel // 2))
        self.stack = nn.Sequential(*layers)

    def forward(self, x):
        """x: (B, N, H, W) -> same shape."""
        b, n, h, w = x.shape
        return self.stack(x.reshape(b * n, 1, h, w)).reshape(b, n, h, w)


class PositionFuser(nn.Module):
    """Attach object-position information to every class slice: the shallow
    backbone features are resampled to the cost volume's grid, concatenated
    with each (1-channel) slice, and mapped by a shared linear layer."""

    def __init__(self, pos_in, out_channels=16):
        super().__init__()
        self.project = nn.Conv2d(1 + pos_in, out_channels, 1)

    def forward(self, x, u_level1):
        """x: (B, N, H, W); u_level1: (B, C1, H1, W1) -> (B, N, P, H, W)."""
        b, n, h, w = x.shape
        pos = u_level1
        if pos.shape[-2:] != (h, w):
            pos = F.interpolate(pos, size=(h, w), mode="bilinear", align_corners=False)
        pos = pos.unsqueeze(1).expand(b, n, -1, h, w)
        stacked = torch.cat([x.unsqueeze(2), pos], dim=2)  # (B, N, 1+C1, H, W)
        out = self.project(stacked.reshape(b * n, -1, h, w))
        return out.reshape(b, n, -1, h, w)


class DecodeHead(nn.Module):
    """Per-class logits from the position-fused cost volume and the enhanced
    target feature.

    Each class slice is upsampled to the target feature's grid and combined
    with the shared feature channels, either by channel concatenation
    (default) or by projecting the slice to the feature width and adding
    element-wise; a small shared conv stack then emits one logit per class per
    pixel. Ties in the downstream argmax resolve toward the lowest class
    index.
    """

    def __init__(self, slice_channels, feat_dim, hidden=16, fusion="concat"):
        super().__init__()
        if fusion not in ("concat", "add"):
            raise ValueError(f"unknown fusion mode {fusion!r}")
        self.fusion = fusion
        if fusion == "add":
            self.slice_proj = nn.Conv2d(slice_channels, feat_dim, 1)
            in_ch = feat_dim
        else:
            in_ch = slice_channels + feat_dim
        self.head = nn.Sequential(
            nn.Conv2d(in_ch, hidden, 1), nn.GELU(), nn.Conv2d(hidden, 1, 3, padding=1)
        )

    def forward(self, x_hat, o_hat):
        """x_hat: (B, N, P, H', W'); o_hat: (B, C, H, W) -> logits (B, N, H, W)."""
        b, n, p = x_hat.shape[:3]
        h, w = o_hat.shape[-2:]
        slices = x_hat.reshape(b * n, p, *x_hat.shape[-2:])
        if slices.shape[-2:] != (h, w):
            slices = F.interpolate(slices, size=(h, w), mode="bilinear", align_corners=False)
        feat = o_hat.unsqueeze(1).expand(b, n, -1, h, w).reshape(b * n, -1, h, w)
        if self.fusion == "add":
            merged = self.slice_proj(slices) + feat
        else:
            merged = torch.cat([slices, feat], dim=1)
        return self.head(merged).reshape(b, n, h, w)
