"""Training loop: composite loss, open-vocabulary masking, schedule and
augmentation.

The loss is a weighted sum of the main cross-entropy over the presented
(seen) classes and the auxiliary cross-entropy from the fusion head. Unseen
classes never supervise training: their mask pixels become ignore labels and
the corresponding input pixels are blacked out in every clip frame. An audit
counter tracks how many loss pixels originate from unseen classes; it must
stay at zero.

Every source of randomness derives from (config seed, step), so runs with the
same config and seed reproduce checkpoints byte for byte in single-thread
mode.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import save_checkpoint
from .clipio import ClassVocabulary, VideoClipSample, VideoDataset, load_mask
from .config import PipelineConfig, TrainConfig

IGNORE = 255


class NonFiniteLossError(RuntimeError):
    pass


def validate_train_config(tc: TrainConfig):
    if tc.alpha < 0 or tc.beta < 0:
        raise ValueError("loss weights must be nonnegative")
    if tc.lr <= 0:
        raise ValueError("learning rate must be positive")
    if tc.warmup_iters > tc.iterations:
        raise ValueError("warmup_iters exceeds iterations")
    if tc.batch_size < 1 or tc.iterations < 0:
        raise ValueError("bad batch size or iteration count")
    if tc.scale_min > tc.scale_max or tc.scale_min <= 0:
        raise ValueError("bad augmentation scale range")


def combine_loss(l_main, l_aux, alpha, beta):
    """Weighted sum of the main and auxiliary losses."""
    return alpha * l_main + beta * l_aux


def lr_at(step, base_lr, warmup_iters):
    """Linear ramp from 0 over the warmup, then constant."""
    if warmup_iters > 0 and step < warmup_iters:
        return base_lr * step / warmup_iters
    return base_lr


def nearest_resize_mask(mask, out_hw):
    """Nearest-neighbor label resize with pixel-center mapping:
    out[i, j] = src[floor((i + .5) * H / H_out), floor((j + .5) * W / W_out)]."""
    h, w = mask.shape
    oh, ow = out_hw
    rows = np.minimum((np.arange(oh) + 0.5) * h / oh, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(ow) + 0.5) * w / ow, w - 1).astype(np.int64)
    return mask[rows][:, cols]


def bilinear_resize_frames(frames, out_hw):
    """frames: list of HxWx3 float arrays -> same list at out_hw."""
    x = torch.from_numpy(np.stack(frames)).permute(0, 3, 1, 2)
    y = F.interpolate(x, size=out_hw, mode="bilinear", align_corners=False)
    return list(y.permute(0, 2, 3, 1).numpy())


def augment_sample(sample: VideoClipSample, rng, scale_min, scale_max, crop):
    """Random scale then random crop, identical geometry for every frame and
    mask of the sample. Frames resample bilinearly, masks nearest-neighbor."""
    h, w = sample.target_mask.shape
    s = float(rng.uniform(scale_min, scale_max))
    sh, sw = max(crop, round(h * s)), max(crop, round(w * s))
    y0 = int(rng.integers(0, sh - crop + 1))
    x0 = int(rng.integers(0, sw - crop + 1))

    frames = sample.frames()
    scaled = frames if (sh, sw) == (h, w) else bilinear_resize_frames(frames, (sh, sw))
    cropped = [f[y0 : y0 + crop, x0 : x0 + crop] for f in scaled]

    def aug_mask(m):
        mm = m if (sh, sw) == (h, w) else nearest_resize_mask(m, (sh, sw))
        return mm[y0 : y0 + crop, x0 : x0 + crop]

    out = copy.copy(sample)
    out.past_frames = cropped[:-2]
    out.target_frame = cropped[-2]
    out.random_frame = cropped[-1]
    out.target_mask = aug_mask(sample.target_mask)
    if getattr(sample, "past_masks", None) is not None:
        out.past_masks = [None if m is None else aug_mask(m) for m in sample.past_masks]
    return out


def mask_unseen(sample: VideoClipSample, vocab: ClassVocabulary) -> VideoClipSample:
    """Hide unseen classes from training: unseen labels become the ignore
    index, and the target mask's unseen footprint is zeroed out of every
    input frame (clip frames and the random frame alike)."""
    unseen = np.array(sorted(vocab.unseen_indices), dtype=np.int64)
    out = copy.copy(sample)
    footprint = np.isin(sample.target_mask, unseen)

    def hide_labels(m):
        m2 = m.copy()
        m2[np.isin(m2, unseen)] = vocab.ignore_index
        return m2

    def hide_pixels(f):
        f2 = f.copy()
        f2[footprint] = 0.0
        return f2

    out.target_mask = hide_labels(sample.target_mask)
    out.past_frames = [hide_pixels(f) for f in sample.past_frames]
    out.target_frame = hide_pixels(sample.target_frame)
    out.random_frame = hide_pixels(sample.random_frame)
    if getattr(sample, "past_masks", None) is not None:
        out.past_masks = [None if m is None else hide_labels(m) for m in sample.past_masks]
    return out


class LabelMapper:
    """Map dataset class indices onto positions in the presented class list
    (training presents the seen classes only). Labels outside the list map to
    the ignore index."""

    def __init__(self, presented_classes, ignore_index=IGNORE):
        self.presented = list(presented_classes)
        self.ignore_index = ignore_index
        self.table = np.full(256, ignore_index, dtype=np.int64)
        for pos, cls in enumerate(self.presented):
            self.table[cls] = pos

    def __call__(self, mask):
        return self.table[mask.astype(np.int64)]


def batch_tensors(samples):
    """Stack samples into (clip (B,T,3,H,W), random (B,3,H,W)) float tensors."""
    clips, randoms = [], []
    for s in samples:
        frames = np.stack([*s.past_frames, s.target_frame])
        clips.append(torch.from_numpy(frames).permute(0, 3, 1, 2))
        randoms.append(torch.from_numpy(s.random_frame).permute(2, 0, 1))
    return torch.stack(clips).float(), torch.stack(randoms).float()


def ce_loss(logits, target_np, count_unseen_from=None, unseen_set=()):
    """Cross-entropy with ignore skipping, plus an audit count of loss pixels
    whose original label was unseen (must be zero under protocol masking)."""
    target = torch.from_numpy(np.ascontiguousarray(target_np)).long()
    if logits.shape[-2:] != target.shape[-2:]:
        raise ValueError("logit/target resolution mismatch")
    if (target != IGNORE).any():
        loss = F.cross_entropy(logits, target, ignore_index=IGNORE)
    else:
        loss = logits.sum() * 0.0  # fully ignored batch contributes nothing
    leaked = 0
    if count_unseen_from is not None and len(unseen_set):
        orig = torch.from_numpy(np.ascontiguousarray(count_unseen_from)).long()
        in_loss = target != IGNORE
        was_unseen = torch.isin(orig, torch.tensor(sorted(unseen_set), dtype=torch.long))
        leaked = int((in_loss & was_unseen).sum())
    return loss, leaked


@dataclass
class TrainResult:
    checkpoint: str
    log_path: str
    losses: list = field(default_factory=list)
    unseen_loss_pixels: int = 0  # leakage audit counter, must be 0
    final_loss: float = float("nan")


def train_loop(cfg: PipelineConfig, dataset: VideoDataset, model, out_dir,
               log_every=None) -> TrainResult:
    """Optimize the model on the dataset's seen classes.

    Deterministic given (config, seed): sample selection, augmentation and
    random-frame draws all derive from per-step seeds. Emits a JSONL log with
    one record per logging step (main/aux/combined loss, learning rate) and
    periodic checkpoints; the final checkpoint is always written.
    """
    tc = cfg.train
    validate_train_config(tc)
    torch.set_num_threads(max(1, tc.threads))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    vocab = dataset.vocab
    presented = sorted(vocab.seen_indices)
    presented_names = [vocab.names[i] for i in presented]
    mapper = LabelMapper(presented)
    unseen_set = set(vocab.unseen_indices)
    model.set_input_stats(dataset.mean, dataset.std)
    model.train()

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay
    )
    targets = dataset.annotated_targets()
    if not targets:
        raise ValueError("dataset has no annotated frames to train on")

    log_path = out_dir / "train_log.jsonl"
    log_file = open(log_path, "w", encoding="utf-8")
    losses = []
    audit_total = 0
    log_every = log_every or tc.log_interval

    def write_checkpoint(name, step):
        return save_checkpoint(
            out_dir / name, model, cfg, vocab,
            extra={
                "step": step,
                "unseen_loss_pixels": audit_total,
                "presented_classes": presented,
                "dataset_root": str(dataset.root),
            },
        )

    for step in range(tc.iterations):
        seed_seq = np.random.SeedSequence([tc.seed, step])
        rng = np.random.default_rng(seed_seq)
        lr = lr_at(step, tc.lr, tc.warmup_iters)
        for group in optimizer.param_groups:
            group["lr"] = lr

        batch, originals = [], []
        for slot in range(tc.batch_size):
            vi, fi = targets[int(rng.integers(len(targets)))]
            sample = dataset.sample(
                vi, fi, mode="train", seed=int(rng.integers(2**31 - 1))
            )
            if tc.supervise_all_frames:
                rec = dataset.videos[vi]
                sample.past_masks = [
                    None if t not in rec.mask_paths or t == fi
                    else load_mask(rec.mask_paths[t])
                    for t in sample.timestamps[:-1]
                ]
            sample = augment_sample(sample, rng, tc.scale_min, tc.scale_max, tc.crop)
            originals.append(sample.target_mask.copy())
            batch.append(mask_unseen(sample, vocab))

        clip, rand = batch_tensors(batch)
        text = model.embed_vocabulary(presented_names)
        out = model(clip, rand, text)

        target_full = np.stack([mapper(s.target_mask) for s in batch])
        orig_full = np.stack(originals)
        l_main, leaked = ce_loss(out["logits"], target_full, orig_full, unseen_set)

        aux_hw = out["aux_logits"].shape[-2:]
        target_aux = np.stack(
            [nearest_resize_mask(mapper(s.target_mask), aux_hw) for s in batch]
        )
        orig_aux = np.stack([nearest_resize_mask(o, aux_hw) for o in originals])
        l_aux, leaked_aux = ce_loss(out["aux_logits"], target_aux, orig_aux, unseen_set)
        audit_total += leaked + leaked_aux

        if tc.supervise_all_frames:
            extra_terms = []
            for bi, s in enumerate(batch):
                for ti, m in enumerate(s.past_masks or []):
                    if m is None:
                        continue
                    frame = clip[bi : bi + 1, ti]
                    lg = model.single_frame_logits(frame, text)
                    lf, lk = ce_loss(lg, mapper(m)[None], m[None], unseen_set)
                    extra_terms.append(lf)
                    audit_total += lk
            if extra_terms:
                l_main = l_main + torch.stack(extra_terms).mean()

        loss = combine_loss(l_main, l_aux, tc.alpha, tc.beta)
        if not torch.isfinite(loss):
            log_file.close()
            raise NonFiniteLossError(
                f"non-finite loss at step {step} (batch seed [{tc.seed}, {step}]): "
                f"main={float(l_main.detach()):.6g} aux={float(l_aux.detach()):.6g}"
            )

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        record = {
            "step": step,
            "l_main": float(l_main.detach()),
            "l_aux": float(l_aux.detach()),
            "loss": float(loss.detach()),
            "lr": lr,
            "unseen_loss_pixels": audit_total,
        }
        losses.append(record)
        if step % log_every == 0 or step == tc.iterations - 1:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
        if tc.checkpoint_interval and (step + 1) % tc.checkpoint_interval == 0:
            write_checkpoint(f"checkpoint_{step + 1:06d}.bin", step + 1)

    final = write_checkpoint("checkpoint.bin", tc.iterations)
    log_file.close()
    return TrainResult(
        checkpoint=str(final),
        log_path=str(log_path),
        losses=losses,
        unseen_loss_pixels=audit_total,
        final_loss=losses[-1]["loss"] if losses else math.nan,
    )
