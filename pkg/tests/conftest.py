import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from ovvss.config import PipelineConfig

torch.set_num_threads(1)


def tiny_config():
    """Small model for fast functional tests (not the desk-scale default)."""
    cfg = PipelineConfig()
    cfg.encoders.channels = (4, 8)
    cfg.encoders.pool_ratios = (1, 2)
    cfg.encoders.dim = 8
    cfg.encoders.dense_level = 1
    cfg.encoders.heads = 2
    cfg.rfe.heads = 2
    cfg.rfe.min_level = 1
    cfg.rfe.regions = 3
    cfg.vte.pos_channels = 4
    cfg.vte.refine_hidden = 2
    cfg.vte.decode_hidden = 4
    cfg.train.crop = 16
    cfg.train.batch_size = 1
    cfg.train.iterations = 2
    cfg.train.warmup_iters = 1
    cfg.train.checkpoint_interval = 0
    return cfg


@pytest.fixture
def tiny_cfg():
    return tiny_config()


def write_tiny_dataset(root, num_videos=2, frames=12, size=16, num_classes=4,
                       n_seen=3, seed=0, annotate_all=True, mask_classes=None,
                       names_prefix="thing"):
    """Hand-rolled minimal dataset tree (independent of the generator)."""
    import json

    from PIL import Image

    root = Path(root)
    rng = np.random.default_rng(seed)
    mask_classes = mask_classes or num_classes
    names = [f"{names_prefix} {i}" for i in range(num_classes)]
    (root).mkdir(parents=True, exist_ok=True)
    (root / "vocab.txt").write_text("\n".join(names) + "\n")
    seen = list(range(n_seen))
    unseen = list(range(n_seen, num_classes))
    (root / "splits.txt").write_text(
        ",".join(map(str, seen)) + "\n" + ",".join(map(str, unseen)) + "\n"
    )
    videos = []
    for v in range(num_videos):
        fdir = root / f"vid{v}" / "frames"
        mdir = root / f"vid{v}" / "masks"
        fdir.mkdir(parents=True)
        mdir.mkdir(parents=True)
        annotated = list(range(frames)) if annotate_all else [frames - 1]
        for f in range(frames):
            img = rng.integers(0, 255, (size, size, 3), dtype=np.uint8)
            Image.fromarray(img).save(fdir / f"{f:06d}.png")
            if f in annotated:
                mask = rng.integers(0, mask_classes, (size, size)).astype(np.uint8)
                Image.fromarray(mask).save(mdir / f"{f:06d}.png")
        videos.append({"id": f"vid{v}", "frames": frames, "annotated": annotated})
    (root / "manifest.json").write_text(
        json.dumps(
            {
                "frame_size": [size, size],
                "mean": [0.5, 0.5, 0.5],
                "std": [0.29, 0.29, 0.29],
                "videos": videos,
            }
        )
    )
    return root


@pytest.fixture
def tiny_dataset(tmp_path):
    from ovvss.clipio import load_dataset

    write_tiny_dataset(tmp_path / "data")
    return load_dataset(tmp_path / "data", n_past=2, spacing=2)


@pytest.fixture(scope="session")
def shape_dataset_root(tmp_path_factory):
    """A small generated shape dataset shared across tests."""
    from ovvss.synthdata import GeneratorSpec, generate

    root = tmp_path_factory.mktemp("shapes") / "data"
    spec = GeneratorSpec(
        holdout=("red circle", "blue square"), videos=3, frames_per_video=14,
        image_size=32, seed=7,
    )
    generate(spec, root)
    return root
