"""Command-line entry point.

Subcommands: gen-data, train, eval, predict, visualize. Exit codes: 0 on
success, 1 on runtime failure (message on stderr), 2 on usage errors. Config
values come from an optional file; repeated ``-o key=value`` flags override
it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import clipio, protocol, synthdata, viz
from .checkpoint import load_checkpoint
from .config import (
    ConfigError,
    config_fingerprint,
    load_config,
    parse_assignments,
)
from .model import SegModel
from .train import train_loop


def _build_parser():
    p = argparse.ArgumentParser(prog="ovvss", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic benchmark to disk")
    g.add_argument("--spec", help="generator spec file (key = value lines)")
    g.add_argument("--out", required=True, help="output dataset root")
    g.add_argument("--seed", type=int, help="override the generator seed")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="config file (key = value or JSON)")
    t.add_argument("--data", required=True, help="training dataset root")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("-o", "--override", action="append", default=[],
                   metavar="KEY=VALUE", help="config override, repeatable")
    t.add_argument("--seed", type=int, help="override train.seed")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="evaluation dataset root")
    e.add_argument("--filter", default="all", choices=["all", "seen", "unseen"])
    e.add_argument("--report", help="report file (.json) or results directory")
    e.add_argument("--cross-dataset", action="store_true",
                   help="foreign vocabulary: embed the dataset's class names, skip the match check")
    e.add_argument("--stride", type=int, default=1, help="evaluate every k-th annotated frame")
    e.add_argument("--seed", type=int, help="unused; accepted for uniformity")

    r = sub.add_parser("predict", help="write per-frame index masks for one video")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--video", required=True, help="video id inside the dataset root")
    r.add_argument("--out", required=True, help="output directory for mask PNGs")
    r.add_argument("--seed", type=int, help="unused; accepted for uniformity")

    v = sub.add_parser("visualize", help="render a mask as a color overlay")
    v.add_argument("--mask", required=True, help="index-mask PNG")
    v.add_argument("--vocab", required=True, help="vocab.txt fixing the palette size")
    v.add_argument("--out", required=True, help="output RGBA PNG")
    v.add_argument("--seed", type=int, help="unused; accepted for uniformity")
    return p


def _generator_spec(path, seed=None):
    spec = synthdata.GeneratorSpec()
    if path:
        items = parse_assignments(Path(path).read_text("utf-8"))
        names = {f.name: f for f in dataclasses.fields(synthdata.GeneratorSpec)}
        for k, v in items.items():
            if k not in names:
                raise ConfigError(
                    f"unknown generator key {k!r}; valid: {', '.join(sorted(names))}"
                )
            current = getattr(spec, k)
            if isinstance(current, bool):
                v = v.lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                v = int(v)
            elif isinstance(current, float):
                v = float(v)
            elif isinstance(current, tuple):
                v = tuple(s.strip() for s in v.split(",") if s.strip())
            setattr(spec, k, v)
    if seed is not None:
        spec.seed = seed
    return spec


def cmd_gen_data(args):
    if args.spec:
        spec = _generator_spec(args.spec, args.seed)
        synthdata.generate(spec, args.out)
    elif args.seed is not None:
        train_spec = synthdata.default_benchmark_spec(seed=args.seed)
        eval_spec = dataclasses.replace(
            train_spec, videos=10, seed=args.seed + 1, holdout_first_object=True
        )
        synthdata.generate(train_spec, Path(args.out) / "train")
        synthdata.generate(eval_spec, Path(args.out) / "eval")
    else:
        synthdata.make_default_benchmark(args.out)
    print(args.out)
    return 0


def cmd_train(args):
    cfg = load_config(args.config, args.override)
    if args.seed is not None:
        cfg.train.seed = args.seed
    dataset = clipio.load_dataset(args.data, n_past=cfg.train.n_past,
                                  spacing=cfg.train.spacing)
    model = SegModel(cfg, num_seen=len(dataset.vocab.seen_indices), seed=cfg.train.seed)
    result = train_loop(cfg, dataset, model, args.out)
    print(result.checkpoint)
    return 0


def cmd_eval(args):
    if args.cross_dataset:
        report = protocol.cross_dataset_eval(
            args.checkpoint, args.data, args.filter, stride=args.stride
        )
    else:
        report = protocol.evaluate(args.checkpoint, args.data, args.filter,
                                   stride=args.stride)
    text = report.to_json()
    if args.report:
        target = Path(args.report)
        if target.suffix == ".json":
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(text, "utf-8")
        else:
            _, cfg, _, _ = load_checkpoint(args.checkpoint)
            target = protocol.write_report(
                report, target, config_fingerprint(cfg), tag=f"eval_{args.filter}"
            )
        print(str(target))
    else:
        print(text)
    return 0


def cmd_predict(args):
    model, _, vocab, _ = load_checkpoint(args.checkpoint)
    dataset = clipio.load_dataset(args.data)
    if tuple(vocab.names) != tuple(dataset.vocab.names):
        names = dataset.vocab.names  # foreign vocabulary, embedded fresh
    else:
        names = vocab.names
    predictor = protocol.model_predictor(model, list(names))
    rec = dataset.video(args.video)
    vi = [r.video_id for r in dataset.videos].index(args.video)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for start in range(0, len(rec), 4):
        idxs = range(start, min(start + 4, len(rec)))
        samples = [
            dataset.sample(vi, fi, mode="infer", require_mask=False) for fi in idxs
        ]
        for fi, pred in zip(idxs, predictor(samples)):
            Image.fromarray(pred.astype(np.uint8)).save(
                out_dir / (clipio.FRAME_PATTERN % fi)
            )
    print(str(out_dir))
    return 0


def cmd_visualize(args):
    names = [
        ln.strip()
        for ln in Path(args.vocab).read_text("utf-8").splitlines()
        if ln.strip()
    ]
    mask = clipio.load_mask(args.mask)
    viz.save_overlay(mask, len(names), args.out)
    print(args.out)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "visualize": cmd_visualize,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, OSError, RuntimeError,
            clipio.DatasetError, synthdata.GeneratorError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
