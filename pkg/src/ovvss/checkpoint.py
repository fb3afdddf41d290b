"""Checkpoint serialization.

Single binary blob: the magic string "OV2VSS1", a little-endian uint32 header
length, a JSON header (format version, flattened config, vocabulary, tensor
manifest with names and shapes), then the tensor data as raw 32-bit
little-endian floats in manifest order. Writes go to a temp file in the same
directory and are renamed into place, so a crash never leaves a partial
checkpoint behind.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .clipio import ClassVocabulary
from .config import PipelineConfig, flatten_config, set_key

MAGIC = b"OV2VSS1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def _named_tensors(model):
    for name, p in model.named_parameters():
        yield name, p
    for name, b in model.named_buffers():
        yield name, b


def save_checkpoint(path, model, cfg: PipelineConfig, vocab: ClassVocabulary, extra=None):
    """Write model parameters and buffers plus enough metadata to rebuild."""
    manifest = []
    blobs = []
    for name, t in _named_tensors(model):
        arr = t.detach().cpu().to(torch.float32).numpy()
        manifest.append({"name": name, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = {
        "version": FORMAT_VERSION,
        "config": flatten_config(cfg),
        "num_seen": model.num_seen,
        "vocab": {
            "names": list(vocab.names),
            "seen": sorted(vocab.seen_indices),
            "unseen": sorted(vocab.unseen_indices),
            "ignore_index": vocab.ignore_index,
        },
        "tensors": manifest,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)
    return path


def read_header(path):
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        return json.loads(f.read(hlen).decode("utf-8"))


def load_checkpoint(path):
    """Rebuild the model from a checkpoint.

    Returns (model, cfg, vocab, header). The model is reconstructed from the
    stored config and seeded identically, then every tensor is overwritten
    from the blob.
    """
    from .model import SegModel

    path = Path(path)
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
        cfg = PipelineConfig()
        for k, v in header["config"].items():
            set_key(cfg, k, v)
        model = SegModel(cfg, num_seen=header["num_seen"], seed=0)
        tensors = dict(_named_tensors(model))
        for entry in header["tensors"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in tensors:
                raise CheckpointError(f"{path}: unknown tensor {name!r}")
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(4 * n)
            if len(raw) != 4 * n:
                raise CheckpointError(f"{path}: truncated data for {name!r}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
            with torch.no_grad():
                tensors[name].copy_(torch.from_numpy(arr.copy()))
    v = header["vocab"]
    vocab = ClassVocabulary(
        names=tuple(v["names"]),
        seen_indices=frozenset(v["seen"]),
        unseen_indices=frozenset(v["unseen"]),
        ignore_index=v["ignore_index"],
    )
    return model, cfg, vocab, header


def checkpoint_bytes(model):
    """Concatenated float32 bytes of all tensors, for equality checks."""
    return b"".join(
        np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy(), dtype="<f4").tobytes()
        for _, t in _named_tensors(model)
    )
