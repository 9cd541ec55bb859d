"""Segmentation quality from a confusion matrix.

counts[g][p] is the number of pixels with ground truth g predicted p.
Per-class IoU is TP / (TP + FP + FN); classes that never occur in either
the prediction or the ground truth have an undefined IoU, are reported
as None, and are excluded from the mean rather than counted as zero.
Pixels whose ground truth equals `ignore_label` are skipped entirely.
Matrices merge by addition, so per-image accumulation order is
irrelevant.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import DataError, DimensionError


class ConfusionMatrix:
    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise DimensionError(f"ConfusionMatrix: need >= 1 class, got {num_classes}")
        self.num_classes = int(num_classes)
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray,
                   ignore_label: Optional[int] = None) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise DimensionError(
                f"accumulate: prediction {pred.shape} vs ground truth {gt.shape}")
        if not (np.issubdtype(pred.dtype, np.integer)
                and np.issubdtype(gt.dtype, np.integer)):
            raise DataError("accumulate: class maps must be integer arrays")
        keep = np.ones(gt.shape, dtype=bool) if ignore_label is None \
            else gt != ignore_label
        p = pred[keep].astype(np.int64)
        g = gt[keep].astype(np.int64)
        k = self.num_classes
        if p.size:
            if p.min() < 0 or p.max() >= k:
                raise DataError(
                    f"accumulate: prediction values outside 0..{k - 1}")
            if g.min() < 0 or g.max() >= k:
                raise DataError(
                    f"accumulate: ground-truth values outside 0..{k - 1}")
            self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DimensionError("merge: class counts differ")
        self.counts += other.counts
        return self

    def iou_per_class(self) -> list[Optional[float]]:
        tp = np.diag(self.counts)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        denom = tp + fp + fn
        return [float(tp[i]) / denom[i] if denom[i] > 0 else None
                for i in range(self.num_classes)]

    def miou(self) -> float:
        defined = [v for v in self.iou_per_class() if v is not None]
        if not defined:
            return 0.0
        return sum(defined) / len(defined)

    def overall_accuracy(self) -> float:
        total = int(self.counts.sum())
        if total == 0:
            return 0.0
        return float(np.trace(self.counts)) / total
