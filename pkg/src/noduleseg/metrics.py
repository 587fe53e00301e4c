"""Pixel-level confusion counts and overlap scores for binary masks."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .imaging import as_mask

__all__ = ["ConfusionCounts", "MetricsReport", "confusion", "compute_metrics", "evaluate"]

METRIC_FIELDS = ("accuracy", "sensitivity", "specificity", "dice", "jaccard")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsReport:
    counts: ConfusionCounts
    accuracy: float
    sensitivity: float
    specificity: float
    dice: float
    jaccard: float

    def to_dict(self) -> dict:
        doc = {name: getattr(self, name) for name in METRIC_FIELDS}
        doc.update(asdict(self.counts))
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        counts = ConfusionCounts(*(int(doc[k]) for k in ("tp", "fp", "fn", "tn")))
        return cls(counts, *(float(doc[k]) for k in METRIC_FIELDS))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def confusion(pred, truth) -> ConfusionCounts:
    pred = as_mask(pred).astype(bool)
    truth = as_mask(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"dimension mismatch: {pred.shape} vs {truth.shape}")
    return ConfusionCounts(
        tp=int(np.count_nonzero(pred & truth)),
        fp=int(np.count_nonzero(pred & ~truth)),
        fn=int(np.count_nonzero(~pred & truth)),
        tn=int(np.count_nonzero(~pred & ~truth)),
    )


def _ratio(num: int, den: int) -> float:
    # 0/0 scores as perfect: nothing to find and nothing found
    return 1.0 if den == 0 else num / den


def compute_metrics(counts: ConfusionCounts) -> MetricsReport:
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    if counts.total == 0:
        raise ValueError("cannot score an empty comparison")
    return MetricsReport(
        counts=counts,
        accuracy=(tp + tn) / counts.total,
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        dice=_ratio(2 * tp, 2 * tp + fp + fn),
        jaccard=_ratio(tp, tp + fp + fn),
    )


def evaluate(pred, truth) -> MetricsReport:
    return compute_metrics(confusion(pred, truth))
