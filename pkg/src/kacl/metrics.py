"""Per-class ROC AUC and IoU-thresholded localization accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from kacl.gradcam import BoundingBox, iou

DEFAULT_IOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)


def binary_auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with midranks for ties; None when only one class is present."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class AUCResult:
    per_class: list[float | None]
    mean: float | None
    undefined: list[int]


def eval_auc(scores, labels) -> AUCResult:
    """Column-wise AUC of [N, K] scores against [N, K] 0/1 labels.

    Columns with a single class present are reported as None and left out of the mean.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    per = [binary_auc(scores[:, k], labels[:, k]) for k in range(scores.shape[1])]
    defined = [a for a in per if a is not None]
    return AUCResult(per, float(np.mean(defined)) if defined else None,
                     [k for k, a in enumerate(per) if a is None])


@dataclass
class LocalizationTable:
    thresholds: list[float]
    # accuracy[t][k]: class k at thresholds[t], None if the class has no test image
    accuracy: list[list[float | None]]
    mean: list[float | None]
    counts: list[int]

    def is_monotone(self) -> bool:
        """Accuracy never increases with the IoU threshold, for every class."""
        order = np.argsort(self.thresholds)
        for k in range(len(self.counts)):
            col = [self.accuracy[t][k] for t in order if self.accuracy[t][k] is not None]
            if any(b > a for a, b in zip(col, col[1:])):
                return False
        return True


def localization_table(pred: list[BoundingBox], truth: list[BoundingBox], classes,
                       n_classes: int, thresholds=DEFAULT_IOU_THRESHOLDS) -> LocalizationTable:
    """A prediction counts as correct only when IoU is strictly above the threshold."""
    classes = np.asarray(classes, dtype=int)
    ious = np.array([iou(p, t) for p, t in zip(pred, truth)])
    counts = [int(np.sum(classes == k)) for k in range(n_classes)]
    acc, means = [], []
    for thr in thresholds:
        row = []
        for k in range(n_classes):
            sel = classes == k
            row.append(float(np.mean(ious[sel] > thr)) if sel.any() else None)
        defined = [a for a in row if a is not None]
        acc.append(row)
        means.append(float(np.mean(defined)) if defined else None)
    return LocalizationTable([float(t) for t in thresholds], acc, means, counts)
