"""End-to-end open-vocabulary video segmentation model.

Wires the backbone, temporal fusion, random-frame enhancement and the
text-guided cost-volume decoder into one trainable module. The vocabulary is
presented as a text feature matrix at call time, so the same parameters serve
any class count: training presents the seen classes, inference may present
seen plus novel ones.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import PipelineConfig
from .encoders import (
    DEFAULT_TEMPLATES,
    DenseFeatureProjector,
    FeaturePyramid,
    PyramidEnhancer,
    build_image_encoder,
    build_text_encoder,
)
from .rfe import RandomFrameEnhancer
from .stcf import AuxiliaryHead, ClipFuser, flatten_map
from .vte import CostVolumeRefiner, DecodeHead, PositionFuser, TextRefiner, build_cost_volume


def upsample_per_class(logits, out_hw):
    """Bilinear upsample with classes folded into the batch axis.

    Upsampling (B, N, h, w) directly vectorizes over channels, and SIMD
    main-loop vs tail lanes can differ in the last ulp, which would make a
    class's logits depend on its position in the vocabulary. One channel per
    batch element keeps the result exactly permutation-equivariant.
    """
    b, n, h, w = logits.shape
    out = F.interpolate(
        logits.reshape(b * n, 1, h, w), size=out_hw, mode="bilinear",
        align_corners=False,
    )
    return out.reshape(b, n, *out_hw)


class SegModel(nn.Module):
    """Full pipeline. ``num_seen`` fixes the auxiliary head width and the
    default region count; everything on the main path is class-count free."""

    def __init__(self, cfg: PipelineConfig = None, num_seen: int = 1, seed: int = 0):
        super().__init__()
        cfg = cfg or PipelineConfig()
        self.cfg = cfg
        self.num_seen = num_seen
        self.init_seed = seed
        enc = cfg.encoders
        channels = tuple(enc.channels)
        dim = enc.dim

        torch.manual_seed(seed)  # all submodule init draws are reproducible
        self.backbone = build_image_encoder(
            enc.image, weights=enc.image_weights or None, channels=channels
        )
        self.enhancer = PyramidEnhancer(channels, tuple(enc.pool_ratios))
        level_tokens = None
        if cfg.stcf.affinity_conv == "dense":
            # dense mode fixes per-level token counts from the training crop
            side = cfg.train.crop
            level_tokens = [(side // 2 ** (l + 1)) ** 2 for l in range(len(channels))]
        self.fuser = ClipFuser(
            channels,
            out_dim=dim,
            attn_dim=cfg.stcf.attn_dim,
            raw_affinity=cfg.stcf.raw_affinity,
            conv_kernel=cfg.stcf.conv_kernel,
            affinity_conv=cfg.stcf.affinity_conv,
            level_tokens=level_tokens,
        )
        self.aux_head = AuxiliaryHead(dim, num_seen)
        regions = cfg.rfe.regions or num_seen
        self.rfe = RandomFrameEnhancer(
            channels,
            dim=dim,
            regions=regions,
            heads=cfg.rfe.heads,
            residual=cfg.rfe.residual,
            min_level=cfg.rfe.min_level,
        )
        self.text_encoder = build_text_encoder(
            enc.text, weights=enc.text_weights or None, dim=dim, table_size=enc.text_table
        )
        self.dense_proj = DenseFeatureProjector(channels, dim=dim, level=enc.dense_level)
        self.text_refiner = TextRefiner(dim, heads=enc.heads, mode=cfg.vte.text_refine)
        self.cost_refiner = CostVolumeRefiner(
            hidden=cfg.vte.refine_hidden, depth=cfg.vte.refine_depth
        )
        self.pos_fuser = PositionFuser(channels[0], out_channels=cfg.vte.pos_channels)
        self.decode_head = DecodeHead(
            cfg.vte.pos_channels, dim, hidden=cfg.vte.decode_hidden, fusion=cfg.vte.fusion
        )
        self.register_buffer("input_mean", torch.full((3,), 0.5))
        self.register_buffer("input_std", torch.full((3,), 0.25))
        self.zero_norm_count = 0  # guarded zero-norm cosine divisions, cumulative

    def set_input_stats(self, mean, std):
        self.input_mean.copy_(torch.as_tensor(mean, dtype=torch.float32))
        self.input_std.copy_(torch.as_tensor(std, dtype=torch.float32))

    def standardize(self, frames):
        """(..., 3, H, W) in [0,1] -> per-channel standardized."""
        mean = self.input_mean.view(3, 1, 1).to(frames.dtype)
        std = self.input_std.view(3, 1, 1).to(frames.dtype)
        return (frames - mean) / std

    def embed_vocabulary(self, names, templates=DEFAULT_TEMPLATES):
        """(N, C) text features for the presented class names."""
        return self.text_encoder(list(names), templates)

    def _clip_pyramids(self, clip):
        """clip (B, T, 3, H, W) -> list of T per-frame FeaturePyramids,
        computed in one backbone pass."""
        b, t = clip.shape[:2]
        pyr = self.backbone(clip.reshape(b * t, *clip.shape[2:]))
        per_frame = []
        for f in range(t):
            per_frame.append(
                FeaturePyramid([lv.reshape(b, t, *lv.shape[1:])[:, f] for lv in pyr.levels])
            )
        return per_frame

    def forward(self, clip, random_frame, text):
        """clip: (B, T, 3, H, W) in [0,1], target frame last; random_frame:
        (B, 3, H, W); text: (N, C) presented-class features.

        Returns per-class logits at input resolution ("logits") and at the
        fused-feature grid ("logits_coarse"), auxiliary seen-class logits
        ("aux_logits"), the raw cost volume ("cost_raw"), and diagnostics.
        """
        in_hw = clip.shape[-2:]
        clip = self.standardize(clip)
        random_frame = self.standardize(random_frame)

        pyramids = self._clip_pyramids(clip)
        enhanced_first = self.enhancer(pyramids[0])
        fused = self.fuser(pyramids, enhanced_first)
        o_t = fused.fused

        random_pyr = self.backbone(random_frame)
        o_hat = self.rfe(o_t, random_pyr) if self.cfg.rfe.enabled else o_t

        dense_frames = [self.dense_proj(p) for p in pyramids]
        if self.cfg.vte.text_pool == "target":
            context = dense_frames[-1]
        else:
            context = torch.stack(dense_frames).mean(dim=0)
        refined_text = self.text_refiner(text, flatten_map(context))

        cost_raw, zero_norm = build_cost_volume(refined_text, dense_frames[-1])
        self.zero_norm_count += zero_norm
        cost = self.cost_refiner(cost_raw)
        x_hat = self.pos_fuser(cost, pyramids[-1].levels[0])
        logits_coarse = self.decode_head(x_hat, o_hat)
        logits = upsample_per_class(logits_coarse, in_hw)
        return {
            "logits": logits,
            "logits_coarse": logits_coarse,
            "aux_logits": self.aux_head(o_t),
            "cost_raw": cost_raw,
            "steps": fused.steps,
            "zero_norm": zero_norm,
        }

    def single_frame_logits(self, frame, text):
        """Degenerate one-frame path (no fusion steps, no random frame),
        used for per-frame supervision of unannotated-regime ablations."""
        frame = self.standardize(frame)
        pyr = self.backbone(frame)
        fused = self.fuser([pyr], self.enhancer(pyr))
        dense = self.dense_proj(pyr)
        refined_text = self.text_refiner(text, flatten_map(dense))
        cost_raw, zero_norm = build_cost_volume(refined_text, dense)
        self.zero_norm_count += zero_norm
        x_hat = self.pos_fuser(self.cost_refiner(cost_raw), pyr.levels[0])
        logits = self.decode_head(x_hat, fused.fused)
        return upsample_per_class(logits, frame.shape[-2:])


def predict_labels(logits):
    """argmax over the class axis with ties toward the lowest class index.

    logits: (B, N, H, W) tensor -> (B, H, W) int64 numpy array.
    """
    return np.argmax(logits.detach().cpu().numpy(), axis=1).astype(np.int64)
