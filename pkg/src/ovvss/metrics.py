"""Segmentation metrics from an accumulated confusion matrix.

All four metrics (mIoU, fwIoU, mAcc, pAcc) derive from integer pixel counts;
division happens only at finalization. Accumulators merge by element-wise
sum, so evaluation parallelizes with a final reduce.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass
class ConfusionAccumulator:
    """num_classes x num_classes counts; rows are ground truth, columns are
    predictions. Pixels labeled ``ignore_index`` are skipped and counted
    separately."""

    num_classes: int
    ignore_index: int = 255
    counts: np.ndarray = field(default=None)
    ignored: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def add(self, pred, gt):
        """Accumulate one prediction/ground-truth pair of identical shape."""
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise MetricsError(f"shape mismatch {pred.shape} vs {gt.shape}")
        keep = gt != self.ignore_index
        self.ignored += int((~keep).sum())
        p = pred[keep].astype(np.int64)
        g = gt[keep].astype(np.int64)
        n = self.num_classes
        if p.size and (p.min() < 0 or p.max() >= n):
            raise MetricsError(f"prediction label out of range [0, {n})")
        if g.size and (g.min() < 0 or g.max() >= n):
            raise MetricsError(f"ground-truth label out of range [0, {n})")
        self.counts += np.bincount(g * n + p, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise MetricsError("cannot merge accumulators of different sizes")
        self.counts += other.counts
        self.ignored += other.ignored
        return self

    @property
    def total(self):
        return int(self.counts.sum())


def accumulate(pred, gt, acc: ConfusionAccumulator) -> ConfusionAccumulator:
    return acc.add(pred, gt)


@dataclass
class MetricsReport:
    miou: float
    fwiou: float
    macc: float
    pacc: float
    per_class_iou: dict  # class index -> IoU, only classes entering mIoU
    class_filter: list
    total_pixels: int
    ignored_pixels: int

    def to_json(self):
        return json.dumps(
            {
                "miou": self.miou,
                "fwiou": self.fwiou,
                "macc": self.macc,
                "pacc": self.pacc,
                "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
                "class_filter": self.class_filter,
                "total_pixels": self.total_pixels,
                "ignored_pixels": self.ignored_pixels,
            },
            sort_keys=True,
            indent=2,
        )


def finalize(acc: ConfusionAccumulator, class_filter=None) -> MetricsReport:
    """Reduce the confusion matrix to mIoU / fwIoU / mAcc / pAcc.

    ``class_filter`` restricts every metric to the given class indices (the
    open-vocabulary report passes the unseen set); classes absent from both
    ground truth and prediction are excluded from the means rather than
    scored 0/0.
    """
    if acc.total == 0:
        raise MetricsError("no pixels accumulated")
    n = acc.num_classes
    counts = acc.counts
    if class_filter is None:
        selected = np.arange(n)
    else:
        selected = np.array(sorted(class_filter), dtype=np.int64)
        if selected.size and (selected.min() < 0 or selected.max() >= n):
            raise MetricsError("class filter outside the class range")
    t = counts.sum(axis=1)  # gt pixels per class
    p = counts.sum(axis=0)  # predicted pixels per class
    diag = np.diag(counts)

    present = selected[(t[selected] + p[selected]) > 0]
    if present.size == 0:
        raise MetricsError("no class in the filter appears in gt or prediction")
    iou = diag[present] / (t[present] + p[present] - diag[present])
    t_present = t[present]
    fwiou = float((t_present / t_present.sum()) @ iou) if t_present.sum() > 0 else 0.0

    with_gt = selected[t[selected] > 0]
    if with_gt.size == 0:
        raise MetricsError("no class in the filter appears in the ground truth")
    macc = float(np.mean(diag[with_gt] / t[with_gt]))
    pacc = float(diag[selected].sum() / t[selected].sum())

    return MetricsReport(
        miou=float(iou.mean()),
        fwiou=fwiou,
        macc=macc,
        pacc=pacc,
        per_class_iou={int(c): float(v) for c, v in zip(present, iou)},
        class_filter=[int(c) for c in selected],
        total_pixels=acc.total,
        ignored_pixels=acc.ignored,
    )
