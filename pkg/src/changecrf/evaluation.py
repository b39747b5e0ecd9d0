"""Segmentation and detection scores and the difference-threshold baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import SQRT3, ImagePair, difference_map


@dataclass(frozen=True)
class SegScore:
    """Pixel counts for the change class; background counts follow by symmetry."""

    tp: int
    fp: int
    fn: int
    tn: int
    excluded: int = 0

    @staticmethod
    def _iou(inter: int, union: int) -> float:
        # a class absent from both maps agrees vacuously
        return 1.0 if union == 0 else inter / union

    @property
    def iou_change(self) -> float:
        return self._iou(self.tp, self.tp + self.fp + self.fn)

    @property
    def iou_background(self) -> float:
        return self._iou(self.tn, self.tn + self.fp + self.fn)

    @property
    def miou(self) -> float:
        return 0.5 * (self.iou_background + self.iou_change)

    def __add__(self, other: "SegScore") -> "SegScore":
        return SegScore(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.tn + other.tn,
            self.excluded + other.excluded,
        )


def miou(pred: np.ndarray, gt: np.ndarray, roi: np.ndarray | None = None) -> SegScore:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    keep = np.ones(gt.shape, dtype=bool) if roi is None else np.asarray(roi, dtype=bool)
    if keep.shape != gt.shape:
        raise ValueError(f"ROI shape {keep.shape} does not match ground truth {gt.shape}")
    p = pred[keep] == 1
    g = gt[keep] == 1
    return SegScore(
        tp=int(np.sum(p & g)),
        fp=int(np.sum(p & ~g)),
        fn=int(np.sum(~p & g)),
        tn=int(np.sum(~p & ~g)),
        excluded=int(keep.size - keep.sum()),
    )


def pooled(scores: list[SegScore]) -> SegScore:
    """Corpus score from summed pixel counts."""
    total = SegScore(0, 0, 0, 0)
    for s in scores:
        total = total + s
    return total


def mean_per_image(scores: list[SegScore]) -> float:
    if not scores:
        raise ValueError("no scores to average")
    return float(np.mean([s.miou for s in scores]))


def precision_recall(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision and recall after each rank, with the score at that rank.

    Ranks follow descending score; equal scores keep input order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    if scores.size == 0:
        raise ValueError("no scores")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise ValueError("no positive labels, recall is undefined")
    order = np.argsort(-scores, kind="stable")
    hits = np.cumsum(labels[order] == 1)
    ranks = np.arange(1, scores.size + 1)
    return hits / ranks, hits / n_pos, scores[order]


def average_precision(scores, labels) -> float:
    """Step-integrated area under the precision-recall curve."""
    precision, recall, _ = precision_recall(scores, labels)
    gains = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(gains * precision))


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if preds.size == 0:
        raise ValueError("no predictions")
    return float(np.mean(preds == labels))


def difference_threshold_baseline(pair: ImagePair, t: float) -> np.ndarray:
    if not 0.0 <= t <= SQRT3:
        raise ValueError(f"threshold {t} outside [0, sqrt(3)]")
    return (difference_map(pair) > t).astype(np.uint8)


def dt_thresholds(n: int = 20, upper: float = 0.5) -> np.ndarray:
    """Evenly spaced sweep over (0, upper]."""
    return np.linspace(upper / n, upper, n)
