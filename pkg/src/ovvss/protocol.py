"""Open-vocabulary evaluation regimes.

The model always receives the full vocabulary (seen plus unseen class names
embedded as text); the seen/unseen distinction only restricts which classes
enter the metric aggregation. Cross-dataset evaluation embeds a foreign
vocabulary with no retraining. A Monte-Carlo simulation of a uniform random
predictor provides the chance-level baseline that trained models are measured
against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .clipio import ClassVocabulary, VideoDataset, load_dataset, load_mask
from .metrics import ConfusionAccumulator, MetricsReport, finalize
from .model import predict_labels
from .train import batch_tensors


class ProtocolError(ValueError):
    pass


def split_vocabulary(vocab_size: int, n_seen: int):
    """First-n split: seen = {0..n_seen-1}, unseen = the rest."""
    if not 0 < n_seen < vocab_size:
        raise ProtocolError(f"need 0 < n_seen < {vocab_size}, got {n_seen}")
    return frozenset(range(n_seen)), frozenset(range(n_seen, vocab_size))


def make_vocabulary(names, n_seen, ignore_index=255) -> ClassVocabulary:
    seen, unseen = split_vocabulary(len(names), n_seen)
    return ClassVocabulary(tuple(names), seen, unseen, ignore_index)


def resolve_filter(vocab: ClassVocabulary, name: str):
    if name == "all":
        return None
    if name == "seen":
        return set(vocab.seen_indices)
    if name == "unseen":
        return set(vocab.unseen_indices)
    raise ProtocolError(f"unknown filter {name!r} (use all|seen|unseen)")


def run_evaluation(predictor, dataset: VideoDataset, class_filter=None,
                   stride=1) -> MetricsReport:
    """Accumulate confusion over every annotated frame and finalize.

    ``predictor(samples) -> list of HxW label maps`` in the dataset's class
    indices; injection point for tests with known-perfect or random
    predictors.
    """
    acc = ConfusionAccumulator(len(dataset.vocab), dataset.vocab.ignore_index)
    targets = dataset.annotated_targets()[::max(1, stride)]
    chunk = 4
    for i in range(0, len(targets), chunk):
        samples = [
            dataset.sample(vi, fi, mode="infer") for vi, fi in targets[i : i + chunk]
        ]
        for sample, pred in zip(samples, predictor(samples)):
            acc.add(pred, sample.target_mask)
    return finalize(acc, class_filter)


def model_predictor(model, names, templates=None):
    """Batched inference closure presenting ``names`` as the vocabulary."""
    from .encoders import DEFAULT_TEMPLATES

    model.eval()
    with torch.no_grad():
        text = model.embed_vocabulary(names, templates or DEFAULT_TEMPLATES)

    def predict(samples):
        clip, rand = batch_tensors(samples)
        with torch.no_grad():
            out = model(clip, rand, text)
        return list(predict_labels(out["logits"]))

    return predict


def evaluate(checkpoint_path, dataset, class_filter="all", stride=1) -> MetricsReport:
    """Same-vocabulary evaluation of a checkpoint.

    The dataset's full vocabulary is presented to the model; ``class_filter``
    ("all", "seen", "unseen") only restricts metric aggregation. Errors out if
    the dataset vocabulary disagrees with the one the checkpoint recorded.
    """
    model, _, ck_vocab, _ = load_checkpoint(checkpoint_path)
    if isinstance(dataset, (str, Path)):
        dataset = load_dataset(dataset)
    if tuple(ck_vocab.names) != tuple(dataset.vocab.names):
        raise ProtocolError(
            "vocabulary mismatch between checkpoint and dataset: "
            f"{len(ck_vocab.names)} vs {len(dataset.vocab.names)} classes; "
            "use cross-dataset evaluation for foreign vocabularies"
        )
    predictor = model_predictor(model, list(dataset.vocab.names))
    return run_evaluation(
        predictor, dataset, resolve_filter(dataset.vocab, class_filter), stride
    )


def cross_dataset_eval(checkpoint_path, foreign_root, class_filter="all",
                       stride=1) -> MetricsReport:
    """Zero-shot evaluation on a dataset with its own vocabulary: the foreign
    class names are embedded as text, nothing is retrained."""
    model, _, _, _ = load_checkpoint(checkpoint_path)
    dataset = load_dataset(foreign_root) if isinstance(foreign_root, (str, Path)) else foreign_root
    predictor = model_predictor(model, list(dataset.vocab.names))
    return run_evaluation(
        predictor, dataset, resolve_filter(dataset.vocab, class_filter), stride
    )


@dataclass
class BaselineReport:
    miou_mean: float
    miou_std: float
    trials: int
    pixels: int

    def to_json(self):
        return json.dumps(self.__dict__, sort_keys=True, indent=2)


def random_baseline(dataset: VideoDataset, class_filter=None, trials=32,
                    max_pixels=10_000, seed=0) -> BaselineReport:
    """Monte-Carlo mIoU of a uniform random predictor on the dataset's
    annotated pixels: the chance level any trained model must clear."""
    vocab = dataset.vocab
    n = len(vocab)
    gt = []
    for rec in dataset.videos:
        for fi in rec.annotated_indices:
            m = load_mask(rec.mask_paths[fi]).ravel()
            gt.append(m[m != vocab.ignore_index])
    gt = np.concatenate(gt) if gt else np.array([], dtype=np.uint8)
    if gt.size == 0:
        raise ProtocolError("dataset has no annotated pixels")
    rng = np.random.default_rng(seed)
    if gt.size > max_pixels:
        gt = gt[rng.choice(gt.size, size=max_pixels, replace=False)]
    mious = []
    for _ in range(trials):
        acc = ConfusionAccumulator(n, vocab.ignore_index)
        acc.add(rng.integers(0, n, size=gt.size), gt)
        mious.append(finalize(acc, class_filter).miou)
    return BaselineReport(
        miou_mean=float(np.mean(mious)),
        miou_std=float(np.std(mious)),
        trials=trials,
        pixels=int(gt.size),
    )


def write_report(report: MetricsReport, results_dir, fingerprint, tag="eval"):
    """Persist a metrics report; the config fingerprint keys the filename."""
    results_dir = Path(results_dir)
    results_dir.mkdir(parents=True, exist_ok=True)
    path = results_dir / f"{tag}_{fingerprint}.json"
    path.write_text(report.to_json(), "utf-8")
    return path
