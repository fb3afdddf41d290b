"""Video clip loading and on-disk dataset format.

A training/inference sample is a short clip of past frames at fixed temporal
spacing, the annotated target frame, plus one temporally distant "random"
frame from the same video that supplies long-range context.

Dataset layout on disk::

    root/vocab.txt            one class name per line, line index = class index
    root/splits.txt           two lines: comma-separated seen indices, unseen indices
    root/manifest.json        {"frame_size": [H, W], "mean": [...], "std": [...],
                               "videos": [{"id": ..., "frames": n, "annotated": [...]}]}
    root/<video_id>/frames/%06d.png
    root/<video_id>/masks/%06d.png    8-bit single channel, value = class index,
                                      255 = ignore; masks may be absent

Frames are decoded to float32 RGB in [0, 1]. Per-channel standardization uses
the mean/std recorded in the manifest and is applied by the model, not here.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

FRAME_PATTERN = "%06d.png"
DEFAULT_IGNORE_INDEX = 255


class DatasetError(Exception):
    """Raised for malformed or inconsistent on-disk datasets."""


class InsufficientHistoryError(ValueError):
    """Not enough frames before the target to build the requested clip."""


class NoCandidateFrameError(ValueError):
    """Every frame of the video is already part of the clip."""


@dataclass(frozen=True)
class ClassVocabulary:
    """Ordered class names with a seen/unseen partition.

    Only seen classes supervise training; unseen classes are evaluated
    zero-shot. ``ignore_index`` marks pixels excluded from loss and metrics.
    """

    names: tuple[str, ...]
    seen_indices: frozenset[int]
    unseen_indices: frozenset[int]
    ignore_index: int = DEFAULT_IGNORE_INDEX

    def __post_init__(self):
        n = len(self.names)
        if n == 0:
            raise ValueError("vocabulary must contain at least one class")
        if len(set(self.names)) != n or any(not s for s in self.names):
            raise ValueError("class names must be unique and non-empty")
        if self.seen_indices & self.unseen_indices:
            raise ValueError("seen and unseen index sets overlap")
        if self.seen_indices | self.unseen_indices != set(range(n)):
            raise ValueError("seen and unseen sets must partition 0..%d" % (n - 1))
        if 0 <= self.ignore_index < n:
            raise ValueError("ignore_index collides with a class index")

    def __len__(self):
        return len(self.names)

    @property
    def seen_names(self):
        return tuple(self.names[i] for i in sorted(self.seen_indices))

    @property
    def unseen_names(self):
        return tuple(self.names[i] for i in sorted(self.unseen_indices))

    def valid_mask_values(self):
        return set(range(len(self.names))) | {self.ignore_index}

    @staticmethod
    def all_seen(names, ignore_index=DEFAULT_IGNORE_INDEX):
        return ClassVocabulary(
            names=tuple(names),
            seen_indices=frozenset(range(len(names))),
            unseen_indices=frozenset(),
            ignore_index=ignore_index,
        )


@dataclass
class VideoClipSample:
    """One assembled sample: ordered past frames, target frame + mask,
    and a random distant frame.

    Frames are HxWx3 float32 in [0, 1]; the mask is HxW uint8 with class
    indices or the ignore value. ``timestamps`` covers the past frames and
    the target, in order; ``random_timestamp`` is the random frame's index.
    """

    past_frames: list[np.ndarray]
    target_frame: np.ndarray
    random_frame: np.ndarray
    target_mask: np.ndarray
    timestamps: list[int]
    random_timestamp: int
    video_id: str = ""
    past_masks: list | None = None  # only loaded for per-frame supervision

    def validate(self, vocab: ClassVocabulary):
        shapes = {f.shape for f in self.frames()}
        if len(shapes) != 1:
            raise ValueError(f"frames disagree on shape: {shapes}")
        ts = self.timestamps
        # Strictly increasing, except that the earliest frame may repeat when
        # the clip was clamped at the video start.
        if any(a > b for a, b in zip(ts, ts[1:])) or any(
            a == b for a, b in zip(ts, ts[1:]) if a != ts[0]
        ):
            raise ValueError(f"timestamps not increasing: {ts}")
        # The random frame must not duplicate a clip frame.  (In training it
        # is drawn uniformly over non-clip indices, so it may land between
        # clip frames; at inference it is the most distant frame.)
        if self.random_timestamp in ts:
            raise ValueError("random frame coincides with a clip frame")
        bad = set(np.unique(self.target_mask)) - vocab.valid_mask_values()
        if bad:
            raise ValueError(f"mask values outside vocabulary: {sorted(bad)}")

    def frames(self):
        """All image tensors in clip order, random frame last."""
        return [*self.past_frames, self.target_frame, self.random_frame]


def build_clip_indices(target_t: int, n: int, spacing: int, video_len: int) -> list[int]:
    """Frame indices [t - n*s, ..., t - s, t] for a clip ending at ``target_t``.

    Raises InsufficientHistoryError when the video does not reach back far
    enough; callers that want static shapes near the video start should clamp
    via :func:`build_clip_indices_clamped`.
    """
    if not 0 <= target_t < video_len:
        raise ValueError(f"target {target_t} outside video of length {video_len}")
    if n < 0 or spacing <= 0:
        raise ValueError("need n >= 0 and spacing >= 1")
    if target_t - n * spacing < 0:
        raise InsufficientHistoryError(
            f"target {target_t} has fewer than {n * spacing} preceding frames"
        )
    return [target_t - (n - i) * spacing for i in range(n + 1)]


def build_clip_indices_clamped(target_t, n, spacing, video_len):
    """Like build_clip_indices but repeats the earliest frame when the video
    start truncates the clip, keeping the clip length static."""
    try:
        return build_clip_indices(target_t, n, spacing, video_len)
    except InsufficientHistoryError:
        return [max(0, target_t - (n - i) * spacing) for i in range(n + 1)]


def select_random_frame(
    target_t: int,
    clip_indices: list[int],
    video_len: int,
    mode: str = "train",
    rng_seed: int = 0,
) -> int:
    """Pick the long-range context frame.

    train: uniform over frame indices not already in the clip.
    infer: the most temporally distant frame, argmax |i - target_t| with ties
    broken toward index 0.
    """
    if video_len <= len(set(clip_indices)):
        raise NoCandidateFrameError("clip already covers every frame")
    if mode == "infer":
        # Distance is maximized at one of the two video ends; ties go to 0.
        return 0 if target_t >= (video_len - 1) - target_t else video_len - 1
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    in_clip = set(clip_indices)
    candidates = [i for i in range(video_len) if i not in in_clip]
    if not candidates:
        raise NoCandidateFrameError("no frame left outside the clip")
    return candidates[random.Random(rng_seed).randrange(len(candidates))]


def load_frame(path) -> np.ndarray:
    """Decode one RGB frame to float32 HxWx3 in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as e:
        raise DatasetError(f"unreadable frame {path}: {e}") from e
    return arr


def load_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                im = im.convert("L")
            arr = np.asarray(im, dtype=np.uint8)
    except OSError as e:
        raise DatasetError(f"unreadable mask {path}: {e}") from e
    if arr.ndim != 2:
        raise DatasetError(f"mask {path} is not single-channel")
    return arr


def _parse_index_line(line, what):
    line = line.strip()
    if not line:
        return frozenset()
    try:
        return frozenset(int(tok) for tok in line.split(","))
    except ValueError as e:
        raise DatasetError(f"splits.txt: bad {what} line {line!r}") from e


def read_vocabulary(root) -> ClassVocabulary:
    root = Path(root)
    vocab_file = root / "vocab.txt"
    if not vocab_file.is_file():
        raise DatasetError(f"missing vocabulary file {vocab_file}")
    names = [ln.strip() for ln in vocab_file.read_text("utf-8").splitlines() if ln.strip()]
    splits_file = root / "splits.txt"
    if not splits_file.is_file():
        raise DatasetError(f"missing splits file {splits_file}")
    lines = splits_file.read_text("utf-8").splitlines()
    if len(lines) < 2:
        raise DatasetError(f"{splits_file} must hold two lines (seen, unseen)")
    seen = _parse_index_line(lines[0], "seen")
    unseen = _parse_index_line(lines[1], "unseen")
    try:
        return ClassVocabulary(tuple(names), seen, unseen)
    except ValueError as e:
        raise DatasetError(f"invalid vocabulary at {root}: {e}") from e


@dataclass
class VideoRecord:
    video_id: str
    frame_paths: list[Path]
    mask_paths: dict[int, Path] = field(default_factory=dict)  # frame index -> path

    def __len__(self):
        return len(self.frame_paths)

    @property
    def annotated_indices(self):
        return sorted(self.mask_paths)


class VideoDataset:
    """Handle over a dataset root; assembles VideoClipSample objects.

    Iteration is stateless: every sample is assembled independently from an
    explicit seed, so concurrent workers produce identical streams.
    """

    def __init__(self, root, n_past=3, spacing=3, validate=True):
        self.root = Path(root)
        self.n_past = n_past
        self.spacing = spacing
        self.vocab = read_vocabulary(self.root)
        manifest_file = self.root / "manifest.json"
        if not manifest_file.is_file():
            raise DatasetError(f"missing manifest file {manifest_file}")
        self.manifest = json.loads(manifest_file.read_text("utf-8"))
        self.mean = np.asarray(self.manifest.get("mean", [0.5, 0.5, 0.5]), dtype=np.float32)
        self.std = np.asarray(self.manifest.get("std", [0.25, 0.25, 0.25]), dtype=np.float32)
        self.videos = self._scan_videos()
        if validate:
            self.validate_masks()

    def _scan_videos(self):
        listed = [v["id"] for v in self.manifest.get("videos", [])]
        ids = listed or sorted(
            p.name for p in self.root.iterdir() if (p / "frames").is_dir()
        )
        videos = []
        for vid in ids:
            frame_dir = self.root / vid / "frames"
            if not frame_dir.is_dir():
                raise DatasetError(f"video {vid}: missing frames directory {frame_dir}")
            frame_paths = sorted(frame_dir.glob("*.png"))
            if not frame_paths:
                raise DatasetError(f"video {vid}: no frames found")
            mask_dir = self.root / vid / "masks"
            mask_paths = {}
            if mask_dir.is_dir():
                for mp in sorted(mask_dir.glob("*.png")):
                    idx = int(mp.stem)
                    if idx >= len(frame_paths):
                        raise DatasetError(
                            f"video {vid}: mask {mp.name} has no matching frame "
                            f"({len(frame_paths)} frames on disk)"
                        )
                    mask_paths[idx] = mp
            videos.append(VideoRecord(vid, frame_paths, mask_paths))
        return videos

    def validate_masks(self):
        """Eagerly check every mask against the vocabulary."""
        valid = self.vocab.valid_mask_values()
        for rec in self.videos:
            for idx, mp in rec.mask_paths.items():
                bad = set(np.unique(load_mask(mp))) - valid
                if bad:
                    raise DatasetError(
                        f"mask {mp} contains values {sorted(bad)} outside the "
                        f"{len(self.vocab)}-class vocabulary"
                    )

    def __len__(self):
        return len(self.videos)

    def video(self, video_id) -> VideoRecord:
        for rec in self.videos:
            if rec.video_id == video_id:
                return rec
        raise DatasetError(f"no video {video_id!r} in {self.root}")

    def annotated_targets(self):
        """(video index, frame index) for every annotated frame."""
        return [
            (vi, fi) for vi, rec in enumerate(self.videos) for fi in rec.annotated_indices
        ]

    def sample(self, video_index, target_t, mode="train", seed=0,
               require_mask=True) -> VideoClipSample:
        """Assemble the clip ending at ``target_t`` plus its random frame.

        With ``require_mask=False`` an unannotated target gets an all-ignore
        mask (prediction-only use)."""
        rec = self.videos[video_index]
        if target_t in rec.mask_paths:
            mask = load_mask(rec.mask_paths[target_t])
        elif require_mask:
            raise DatasetError(f"video {rec.video_id}: frame {target_t} has no mask")
        else:
            mask = None
        indices = build_clip_indices_clamped(target_t, self.n_past, self.spacing, len(rec))
        rand_t = select_random_frame(target_t, indices, len(rec), mode=mode, rng_seed=seed)
        frames = [load_frame(rec.frame_paths[i]) for i in indices]
        if mask is None:
            mask = np.full(frames[-1].shape[:2], self.vocab.ignore_index, dtype=np.uint8)
        return VideoClipSample(
            past_frames=frames[:-1],
            target_frame=frames[-1],
            random_frame=load_frame(rec.frame_paths[rand_t]),
            target_mask=mask,
            timestamps=indices,
            random_timestamp=rand_t,
            video_id=rec.video_id,
        )

    def samples(self, mode="train", seed=0):
        """Yield one sample per annotated frame, in deterministic order."""
        for k, (vi, fi) in enumerate(self.annotated_targets()):
            yield self.sample(vi, fi, mode=mode, seed=seed * 1_000_003 + k)


def load_dataset(root, n_past=3, spacing=3, validate=True) -> VideoDataset:
    """Open a dataset root, validating layout and mask values."""
    return VideoDataset(root, n_past=n_past, spacing=spacing, validate=validate)
