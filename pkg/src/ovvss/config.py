"""Configuration: nested dataclasses addressed by flat dotted keys.

Config files are either `key = value` lines (UTF-8, '#' comments) or a JSON
object with the same dotted keys; CLI overrides use the same syntax and win
over file values. Unknown keys are rejected with the list of valid ones.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields


@dataclass
class StcfConfig:
    raw_affinity: bool = False  # drop softmax/scaling in the pairwise affinity
    conv_kernel: int = 3
    attn_dim: int = 0  # 0 = per-level feature width
    affinity_conv: str = "spatial"  # or "dense" (1x1 over key channels)


@dataclass
class RfeConfig:
    enabled: bool = True
    regions: int = 0  # 0 = one region per seen class
    heads: int = 4
    residual: bool = True
    min_level: int = 2  # shallowest pyramid level entering the collapse


@dataclass
class VteConfig:
    fusion: str = "concat"  # or "add"
    text_refine: str = "mhsa+ffn"  # "mhsa" | "mhsa+ffn" | "off"
    pos_channels: int = 16
    refine_hidden: int = 8
    refine_depth: int = 2
    decode_hidden: int = 16
    text_pool: str = "mean"  # visual context for text refinement: "mean" | "target"


@dataclass
class EncoderConfig:
    image: str = "toy_conv"
    text: str = "toy_hash"
    image_weights: str = ""
    text_weights: str = ""
    channels: tuple = (16, 32, 64, 128)
    pool_ratios: tuple = (1, 2, 4)
    dim: int = 32  # shared text/feature width
    text_table: int = 4096
    dense_level: int = 2  # pyramid level feeding the cost volume
    heads: int = 4  # text refinement heads


@dataclass
class TrainConfig:
    alpha: float = 1.0  # main loss weight
    beta: float = 1.0  # auxiliary loss weight
    iterations: int = 2000
    batch_size: int = 2
    lr: float = 3e-4
    weight_decay: float = 1e-2
    warmup_iters: int = 100
    seed: int = 0
    crop: int = 64
    scale_min: float = 1.0
    scale_max: float = 1.5
    n_past: int = 3
    spacing: int = 3
    supervise_all_frames: bool = False
    checkpoint_interval: int = 1000
    log_interval: int = 50
    threads: int = 1  # 1 = fully deterministic single-thread mode
    eval_stride: int = 1


@dataclass
class PipelineConfig:
    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    stcf: StcfConfig = field(default_factory=StcfConfig)
    rfe: RfeConfig = field(default_factory=RfeConfig)
    vte: VteConfig = field(default_factory=VteConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


class ConfigError(ValueError):
    pass


def _flatten(cfg, prefix=""):
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = list(v) if isinstance(v, tuple) else v
    return out


def flatten_config(cfg) -> dict:
    return _flatten(cfg)


def valid_keys(cfg=None) -> list:
    return sorted(flatten_config(cfg or PipelineConfig()))


def _coerce(raw, current):
    """Parse a raw string (or JSON value) toward the type of ``current``."""
    if isinstance(raw, str):
        s = raw.strip()
        if isinstance(current, bool):
            if s.lower() in ("true", "1", "yes", "on"):
                return True
            if s.lower() in ("false", "0", "no", "off"):
                return False
            raise ConfigError(f"expected a boolean, got {s!r}")
        if isinstance(current, int) and not isinstance(current, bool):
            return int(s)
        if isinstance(current, float):
            return float(s)
        if isinstance(current, tuple):
            return tuple(int(t) if t.strip().lstrip("-").isdigit() else float(t)
                         for t in s.split(",") if t.strip())
        return s
    if isinstance(current, bool):
        if not isinstance(raw, bool):
            raise ConfigError(f"expected a boolean, got {raw!r}")
        return raw
    if isinstance(current, float) and isinstance(raw, (int, float)):
        return float(raw)
    if isinstance(current, int) and isinstance(raw, int):
        return raw
    if isinstance(current, tuple) and isinstance(raw, (list, tuple)):
        return tuple(raw)
    if isinstance(current, str) and isinstance(raw, str):
        return raw
    raise ConfigError(f"cannot interpret {raw!r} as {type(current).__name__}")


def set_key(cfg, key, raw):
    obj = cfg
    parts = key.split(".")
    try:
        for p in parts[:-1]:
            obj = getattr(obj, p)
        current = getattr(obj, parts[-1])
    except AttributeError:
        raise ConfigError(
            f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}"
        ) from None
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"{key!r} is a section, not a value")
    setattr(obj, parts[-1], _coerce(raw, current))


def parse_assignments(text) -> dict:
    """Parse `key = value` lines; blank lines and '#' comments allowed."""
    out = {}
    for ln_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln_no}: expected 'key = value', got {line!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def load_config(path=None, overrides=()) -> PipelineConfig:
    """Build a config from defaults, an optional file, and override strings
    of the form 'key=value' (flags win over the file)."""
    cfg = PipelineConfig()
    if path is not None:
        text = open(path, encoding="utf-8").read()
        if text.lstrip().startswith("{"):
            items = json.loads(text)
        else:
            items = parse_assignments(text)
        for k, v in items.items():
            set_key(cfg, k, v)
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} must look like key=value")
        k, v = ov.split("=", 1)
        set_key(cfg, k.strip(), v.strip())
    return cfg


def config_json(cfg) -> str:
    return json.dumps(flatten_config(cfg), sort_keys=True)


def config_fingerprint(cfg) -> str:
    """Short stable hash of the full flattened config, used in report names."""
    return hashlib.sha256(config_json(cfg).encode("utf-8")).hexdigest()[:10]
