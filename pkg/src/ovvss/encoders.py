"""Image and text encoders behind plug-in registries.

The defaults are deliberately small and fully deterministic so the whole
pipeline trains from scratch on synthetic data: a strided convolutional
pyramid stands in for a pretrained dense image encoder, and a hashed-token
embedding table stands in for a pretrained text encoder. Both honor the same
interfaces a real vision-language backbone would plug into (registry key in
the config, optional external weight file).
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

DEFAULT_TEMPLATES = (
    "a photo of a {}",
    "a video frame of a {}",
    "there is a {} in the scene",
)


@dataclass
class FeaturePyramid:
    """Per-frame multi-scale features, shallowest (highest resolution) first.

    levels[l] has shape (B, C_l, H_l, W_l) with each level half the spatial
    size of the previous one.
    """

    levels: list[torch.Tensor]

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ValueError("pyramid needs at least one level")

    def __len__(self):
        return len(self.levels)

    def validate(self):
        for a, b in zip(self.levels, self.levels[1:]):
            if b.shape[-2] != (a.shape[-2] + 1) // 2 or b.shape[-1] != (a.shape[-1] + 1) // 2:
                raise ValueError("levels do not halve spatially")
        for lv in self.levels:
            if not torch.isfinite(lv).all():
                raise ValueError("non-finite feature values")
        return self


def as_image_batch(frame) -> torch.Tensor:
    """Accept HxWx3 (numpy or tensor), (3,H,W) or (B,3,H,W); return (B,3,H,W)."""
    if isinstance(frame, np.ndarray):
        frame = torch.from_numpy(np.ascontiguousarray(frame))
    if frame.ndim == 3 and frame.shape[-1] == 3:
        frame = frame.permute(2, 0, 1)
    if frame.ndim == 3:
        frame = frame.unsqueeze(0)
    if frame.ndim != 4 or frame.shape[1] != 3:
        raise ValueError(f"expected an RGB image, got shape {tuple(frame.shape)}")
    return frame.float() if not frame.dtype.is_floating_point else frame


class ConvPyramidBackbone(nn.Module):
    """Toy multi-scale image backbone: one stride-2 3x3 conv stage per level.

    A 64x64 input with 4 stages yields levels of spatial size 32/16/8/4 and
    channel widths ``channels`` (default 16/32/64/128).
    """

    def __init__(self, channels=(16, 32, 64, 128), in_channels=3):
        super().__init__()
        self.channels = tuple(channels)
        stages = []
        prev = in_channels
        for c in self.channels:
            stages.append(
                nn.Sequential(nn.Conv2d(prev, c, 3, stride=2, padding=1), nn.GELU())
            )
            prev = c
        self.stages = nn.ModuleList(stages)

    @property
    def num_levels(self):
        return len(self.stages)

    def forward(self, frame) -> FeaturePyramid:
        x = as_image_batch(frame).to(next(self.parameters()).dtype)
        div = 2 ** self.num_levels
        h, w = x.shape[-2:]
        if h % div or w % div:
            raise ValueError(f"input {h}x{w} not divisible by 2^{self.num_levels}")
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return FeaturePyramid(levels)


class PoolingEnhancer(nn.Module):
    """Multi-ratio average-pooling enhancement of one feature map.

    The input is average-pooled at each ratio, resampled back to the input
    resolution, channel-concatenated and linearly projected back to the input
    width. Ratio 1 passes the map through unchanged before the projection.
    """

    def __init__(self, channels, ratios=(1, 2, 4)):
        super().__init__()
        self.ratios = tuple(ratios)
        self.project = nn.Conv2d(channels * len(self.ratios), channels, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        pooled = []
        for r in self.ratios:
            if r == 1:
                pooled.append(x)
                continue
            p = F.avg_pool2d(x, kernel_size=r, stride=r, ceil_mode=True)
            pooled.append(
                F.interpolate(p, size=(h, w), mode="bilinear", align_corners=False)
            )
        return self.project(torch.cat(pooled, dim=1))


class PyramidEnhancer(nn.Module):
    """One PoolingEnhancer per pyramid level, shared across frames."""

    def __init__(self, channels=(16, 32, 64, 128), ratios=(1, 2, 4)):
        super().__init__()
        self.enhancers = nn.ModuleList(PoolingEnhancer(c, ratios) for c in channels)

    def forward(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        if len(pyramid.levels) != len(self.enhancers):
            raise ValueError("pyramid depth does not match enhancer depth")
        return FeaturePyramid([e(u) for e, u in zip(self.enhancers, pyramid.levels)])


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def token_bucket(token: str, table_size: int) -> int:
    """Stable hash of a token into the embedding table (process-independent)."""
    return zlib.crc32(token.encode("utf-8")) % table_size


def check_templates(templates):
    if not templates:
        raise ValueError("need at least one prompt template")
    for t in templates:
        if t.count("{}") != 1:
            raise ValueError(f"template {t!r} must contain exactly one {{}} placeholder")
    return tuple(templates)


class HashTextEncoder(nn.Module):
    """Toy text encoder: crc32 token hashing into a learnable embedding table.

    A string embeds to the mean of its token embeddings; a class name embeds
    to the mean over all filled prompt templates. Shared tokens between class
    names ("red" in "red circle" and "red square") share table rows, which is
    what gives held-out composite classes a usable zero-shot embedding.
    """

    def __init__(self, dim=32, table_size=4096):
        super().__init__()
        self.dim = dim
        self.table_size = table_size
        self.table = nn.Embedding(table_size, dim)
        nn.init.normal_(self.table.weight, std=1.0 / dim**0.5)

    def token_ids(self, text):
        toks = tokenize(text)
        if not toks:
            raise ValueError(f"text {text!r} has no tokens")
        return [token_bucket(t, self.table_size) for t in toks]

    def embed_string(self, text):
        ids = torch.tensor(self.token_ids(text), device=self.table.weight.device)
        return self.table(ids).mean(dim=0)

    def forward(self, names, templates=DEFAULT_TEMPLATES) -> torch.Tensor:
        """(N, C) matrix: per class, mean embedding over all filled templates."""
        templates = check_templates(templates)
        rows = []
        for name in names:
            per_template = [self.embed_string(t.format(name)) for t in templates]
            rows.append(torch.stack(per_template).mean(dim=0))
        return torch.stack(rows)


def encode_text(encoder, vocab_names, templates=DEFAULT_TEMPLATES):
    """Functional wrapper over a text encoder module."""
    return encoder(list(vocab_names), templates)


class DenseFeatureProjector(nn.Module):
    """Dense visual features for the cost volume: pyramid levels from
    ``level`` upward are resampled to that level's grid, concatenated and
    projected to the shared text dimension.

    Deeper levels are essential here: a cell of an early level has only a
    few pixels of receptive field and sees color but not shape, which kills
    compositional zero-shot transfer.
    """

    def __init__(self, level_channels, dim=32, level=2):
        super().__init__()
        if not 1 <= level <= len(level_channels):
            raise ValueError(f"dense level {level} out of range")
        self.level = level
        self.project = nn.Conv2d(sum(level_channels[level - 1:]), dim, 1)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        """(B, C, H', W') dense features at the configured level's resolution."""
        selected = pyramid.levels[self.level - 1:]
        hw = selected[0].shape[-2:]
        stacked = [selected[0]]
        for lv in selected[1:]:
            stacked.append(
                F.interpolate(lv, size=hw, mode="bilinear", align_corners=False)
            )
        return self.project(torch.cat(stacked, dim=1))


IMAGE_ENCODERS = {"toy_conv": ConvPyramidBackbone}
TEXT_ENCODERS = {"toy_hash": HashTextEncoder}


def build_image_encoder(name, weights=None, **kwargs):
    if name not in IMAGE_ENCODERS:
        raise KeyError(f"unknown image encoder {name!r}; known: {sorted(IMAGE_ENCODERS)}")
    enc = IMAGE_ENCODERS[name](**kwargs)
    if weights:
        enc.load_state_dict(torch.load(weights, weights_only=True))
    return enc


def build_text_encoder(name, weights=None, **kwargs):
    if name not in TEXT_ENCODERS:
        raise KeyError(f"unknown text encoder {name!r}; known: {sorted(TEXT_ENCODERS)}")
    enc = TEXT_ENCODERS[name](**kwargs)
    if weights:
        enc.load_state_dict(torch.load(weights, weights_only=True))
    return enc
