"""Confusion-matrix accumulation and mean intersection-over-union."""

from __future__ import annotations

import numpy as np

from .errors import EmptyEvaluationError, ShapeMismatchError


class ConfusionMatrix:
    """C x C counts; rows are ground truth, columns are predictions.
    Ground-truth pixels equal to the ignore index are excluded."""

    def __init__(self, n_classes: int, ignore_index: int = 255):
        self.n_classes = n_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeMismatchError(
                f"prediction {pred.shape} vs ground truth {gt.shape}")
        keep = gt != self.ignore_index
        p = pred[keep].astype(np.int64)
        g = gt[keep].astype(np.int64)
        if p.size and (p.min() < 0 or p.max() >= self.n_classes
                       or g.min() < 0 or g.max() >= self.n_classes):
            raise ShapeMismatchError("class index outside [0, n_classes)")
        flat = np.bincount(g * self.n_classes + p, minlength=self.n_classes ** 2)
        self.counts += flat.reshape(self.n_classes, self.n_classes)

    def iou(self) -> tuple[np.ndarray, float]:
        """Per-class IoU (NaN for absent classes) and the mean over classes
        that appear in either ground truth or prediction."""
        if self.counts.sum() == 0:
            raise EmptyEvaluationError("no scored pixels")
        tp = np.diag(self.counts).astype(np.float64)
        denom = (self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp).astype(np.float64)
        present = denom > 0
        per_class = np.full(self.n_classes, np.nan)
        per_class[present] = tp[present] / denom[present]
        return per_class, float(per_class[present].mean())


def evaluate_miou(preds: list[np.ndarray], gts: list[np.ndarray],
                  n_classes: int = 21, ignore_index: int = 255) -> dict:
    """Accumulate one confusion matrix over the whole set and report IoU."""
    if len(preds) != len(gts):
        raise ShapeMismatchError("prediction and ground-truth counts differ")
    cm = ConfusionMatrix(n_classes, ignore_index)
    for p, g in zip(preds, gts):
        cm.add(p, g)
    per_class, mean = cm.iou()
    return {
        "per_class_iou": [None if np.isnan(v) else float(v) for v in per_class],
        "miou": mean,
        "n_scored_pixels": int(cm.counts.sum()),
    }
