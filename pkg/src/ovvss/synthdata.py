"""Procedural labeled-video generator.

Classes are shape-color composites ("red circle", "blue square") moving over
textured horizontal background bands ("sky band", "ground band"). Held-out
composites whose shape and color both appear among the seen classes make
zero-shot generalization measurable at desk scale: the text encoder shares
the "red" token between "red circle" and "red square", so a held-out
composite has a meaningful embedding even though it never supervised
training.

Output follows the dataset layout of :mod:`ovvss.clipio`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace

import numpy as np
from PIL import Image

from .clipio import FRAME_PATTERN

BACKGROUND_COLORS = {
    "sky band": (152, 198, 240),
    "cloud band": (238, 238, 238),
    "ground band": (141, 102, 60),
    "water band": (32, 112, 108),
}

OBJECT_COLORS = {
    "red": (220, 46, 40),
    "green": (44, 186, 56),
    "blue": (50, 80, 220),
    "yellow": (232, 210, 48),
}

SHAPES = ("circle", "square", "triangle", "cross")


class GeneratorError(Exception):
    pass


@dataclass
class GeneratorSpec:
    shapes: tuple = SHAPES
    colors: tuple = ("red", "green", "blue", "yellow")
    backgrounds: tuple = ("sky band", "cloud band", "ground band", "water band")
    holdout: tuple = ()  # composite names excluded from the seen set
    videos: int = 8
    frames_per_video: int = 24
    image_size: int = 64
    seed: int = 0
    min_objects: int = 1
    max_objects: int = 3
    min_radius: float = 8.0  # shapes must stay resolvable at coarse scales
    max_radius: float = 13.0
    max_speed: float = 2.0
    jitter: float = 0.5
    noise: float = 5.0  # texture noise std in 0..255 units
    seen_only: bool = False  # draw objects from seen composites only
    holdout_first_object: bool = False  # force one held-out object per video
    ignore_border: int = 0

    def composites(self):
        return tuple(f"{c} {s}" for c in self.colors for s in self.shapes)

    def vocabulary_names(self):
        """Backgrounds first, then seen composites, then held-out ones."""
        held = tuple(self.holdout)
        unknown = set(held) - set(self.composites())
        if unknown:
            raise GeneratorError(f"holdout names not generatable: {sorted(unknown)}")
        seen = [c for c in self.composites() if c not in held]
        return tuple(self.backgrounds) + tuple(seen) + held

    def seen_unseen_indices(self):
        names = self.vocabulary_names()
        n_unseen = len(self.holdout)
        return list(range(len(names) - n_unseen)), list(
            range(len(names) - n_unseen, len(names))
        )


def _shape_mask(shape, cx, cy, r, size):
    """Boolean raster of one object at pixel centers."""
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "triangle":  # apex up, base 2r wide at the bottom
        return (np.abs(dy) <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if shape == "cross":
        bar_h = (np.abs(dx) <= r) & (np.abs(dy) <= r / 3.0)
        bar_v = (np.abs(dy) <= r) & (np.abs(dx) <= r / 3.0)
        return bar_h | bar_v
    raise GeneratorError(f"unknown shape {shape!r}")


def shape_pixel_count(shape, r, size=256):
    """Independent area probe used by generation sanity tests."""
    return int(_shape_mask(shape, size / 2, size / 2, r, size).sum())


@dataclass
class _Object:
    name: str
    color: tuple
    shape: str
    radius: float
    pos: np.ndarray  # float (x, y)
    vel: np.ndarray
    label: int


def _reflect(value, lo, hi):
    # reflect into [lo, hi]; object steps are far smaller than the frame
    if value < lo:
        return lo + (lo - value)
    if value > hi:
        return hi - (value - hi)
    return value


def _render_video(spec: GeneratorSpec, names, rng):
    size = spec.frames_per_video
    s = spec.image_size
    n_bands = len(spec.backgrounds)
    band_edges = [round(i * s / n_bands) for i in range(n_bands + 1)]
    label_of = {name: i for i, name in enumerate(names)}

    allowed = list(spec.composites())
    if spec.seen_only:
        seen_set = set(names[: len(names) - len(spec.holdout)])
        allowed = [c for c in allowed if c in seen_set]

    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objects = []
    for i in range(n_objects):
        if i == 0 and spec.holdout_first_object and spec.holdout:
            name = spec.holdout[int(rng.integers(len(spec.holdout)))]
        else:
            name = allowed[int(rng.integers(len(allowed)))]
        color_name, shape = name.split(" ", 1)
        r = float(rng.uniform(spec.min_radius, spec.max_radius))
        margin = r + 1.0
        pos = rng.uniform(margin, s - 1 - margin, size=2)
        angle = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.3, max(0.31, spec.max_speed - spec.jitter))
        objects.append(
            _Object(
                name=name,
                color=OBJECT_COLORS[color_name],
                shape=shape,
                radius=r,
                pos=pos.astype(np.float64),
                vel=speed * np.array([np.cos(angle), np.sin(angle)]),
                label=label_of[name],
            )
        )

    frames, masks = [], []
    for _ in range(size):
        img = np.zeros((s, s, 3), dtype=np.float64)
        mask = np.zeros((s, s), dtype=np.uint8)
        for b, bg in enumerate(spec.backgrounds):
            rows = slice(band_edges[b], band_edges[b + 1])
            img[rows] = BACKGROUND_COLORS[bg]
            mask[rows] = label_of[bg]
        for obj in objects:
            m = _shape_mask(obj.shape, obj.pos[0], obj.pos[1], obj.radius, s)
            img[m] = obj.color
            mask[m] = obj.label
        img += rng.normal(0.0, spec.noise, img.shape)
        if spec.ignore_border > 0:
            w = spec.ignore_border
            mask[:w], mask[-w:], mask[:, :w], mask[:, -w:] = 255, 255, 255, 255
        frames.append(np.clip(img, 0, 255).astype(np.uint8))
        masks.append(mask)
        for obj in objects:
            step = obj.vel + rng.uniform(-spec.jitter, spec.jitter, size=2)
            margin = obj.radius + 1.0
            nxt = obj.pos + step
            for d in range(2):
                lo, hi = margin, s - 1 - margin
                reflected = _reflect(nxt[d], lo, hi)
                if reflected != nxt[d]:
                    obj.vel[d] = -obj.vel[d]
                nxt[d] = reflected
            obj.pos = nxt
    return frames, masks


def generate(spec: GeneratorSpec, out_root) -> str:
    """Write a full dataset tree (frames, masks, vocab, splits, manifest)."""
    from pathlib import Path

    out_root = Path(out_root)
    if out_root.exists() and any(out_root.iterdir()):
        raise GeneratorError(f"refusing to write into non-empty {out_root}")
    out_root.mkdir(parents=True, exist_ok=True)

    names = spec.vocabulary_names()
    seen, unseen = spec.seen_unseen_indices()
    (out_root / "vocab.txt").write_text("\n".join(names) + "\n", "utf-8")
    (out_root / "splits.txt").write_text(
        ",".join(map(str, seen)) + "\n" + ",".join(map(str, unseen)) + "\n", "utf-8"
    )

    pixel_sum = np.zeros(3)
    pixel_sqsum = np.zeros(3)
    pixel_count = 0
    videos_meta = []
    for vi in range(spec.videos):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, vi]))
        frames, masks = _render_video(spec, names, rng)
        vid = f"video_{vi:04d}"
        frame_dir = out_root / vid / "frames"
        mask_dir = out_root / vid / "masks"
        frame_dir.mkdir(parents=True)
        mask_dir.mkdir(parents=True)
        for fi, (frame, mask) in enumerate(zip(frames, masks)):
            Image.fromarray(frame).save(frame_dir / (FRAME_PATTERN % fi))
            Image.fromarray(mask).save(mask_dir / (FRAME_PATTERN % fi))
            x = frame.reshape(-1, 3).astype(np.float64) / 255.0
            pixel_sum += x.sum(axis=0)
            pixel_sqsum += (x * x).sum(axis=0)
            pixel_count += x.shape[0]
        videos_meta.append(
            {"id": vid, "frames": len(frames), "annotated": list(range(len(frames)))}
        )

    mean = pixel_sum / pixel_count
    std = np.sqrt(np.maximum(pixel_sqsum / pixel_count - mean**2, 1e-8))
    manifest = {
        "frame_size": [spec.image_size, spec.image_size],
        "mean": [round(float(v), 6) for v in mean],
        "std": [round(float(v), 6) for v in std],
        "videos": videos_meta,
        "generator": {f.name: getattr(spec, f.name) for f in fields(spec)},
    }
    (out_root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), "utf-8")
    return str(out_root)


DEFAULT_HOLDOUT = ("red circle", "blue square")


def default_benchmark_spec(seed=20240601):
    """16 composite classes + 4 backgrounds = 20 classes; two composites held
    out whose shape and color both occur among the seen classes."""
    return GeneratorSpec(
        holdout=DEFAULT_HOLDOUT,
        videos=40,
        frames_per_video=24,
        image_size=64,
        seed=seed,
    )


def make_default_benchmark(out_root) -> str:
    """Write the standard benchmark: a 40-video training split and a 10-video
    evaluation split (each its own dataset root) sharing one vocabulary. The
    evaluation split forces a held-out composite into every video so the
    unseen metrics are always defined."""
    from pathlib import Path

    out_root = Path(out_root)
    train_spec = default_benchmark_spec()
    eval_spec = replace(
        train_spec, videos=10, seed=train_spec.seed + 1, holdout_first_object=True
    )
    # compositional guarantee: each held-out name's shape and color must
    # survive in the seen set
    names = train_spec.vocabulary_names()
    seen_names = set(names[: len(names) - len(train_spec.holdout)])
    for name in train_spec.holdout:
        color, shape = name.split(" ", 1)
        assert any(color in s and s != name for s in seen_names), name
        assert any(s.endswith(shape) and s != name for s in seen_names), name
    generate(train_spec, out_root / "train")
    generate(eval_spec, out_root / "eval")
    return str(out_root)
