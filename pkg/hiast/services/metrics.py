"""Segmentation metrics: confusion matrix and (mean) intersection-over-union."""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.metrics import confusion_matrix as _sk_confusion_matrix

from hiast.exceptions import ShapeMismatchError
from hiast.models import IGNORE, LabelMap

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """C x C counts; rows are reference classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(
    pred: Sequence[LabelMap],
    ref: Sequence[LabelMap],
    num_classes: int,
    restrict: bool = False,
) -> ConfusionMatrix:
    """Count (reference, prediction) pairs over all pixels with a valid reference.

    Reference IGNORE pixels are always skipped. Predicted IGNORE pixels are
    only allowed with ``restrict=True`` (evaluation over selected pixels),
    in which case they are skipped too.
    """
    if len(pred) != len(ref):
        raise ShapeMismatchError(f"{len(pred)} predictions but {len(ref)} references")
    p_all, r_all = [], []
    for p, r in zip(pred, ref):
        if p.shape != r.shape:
            raise ShapeMismatchError(f"prediction shape {p.shape} != reference shape {r.shape}")
        p_all.append(p.labels.ravel())
        r_all.append(r.labels.ravel())
    if not p_all:
        return ConfusionMatrix(np.zeros((num_classes, num_classes), dtype=np.int64))

    p_flat = np.concatenate(p_all)
    r_flat = np.concatenate(r_all)
    keep = r_flat != IGNORE
    if restrict:
        keep &= p_flat != IGNORE
    elif np.any(p_flat[keep] == IGNORE):
        raise ValueError("prediction contains IGNORE pixels; use restrict=True to evaluate selected pixels")

    if not np.any(keep):
        return ConfusionMatrix(np.zeros((num_classes, num_classes), dtype=np.int64))
    counts = _sk_confusion_matrix(r_flat[keep], p_flat[keep], labels=np.arange(num_classes))
    return ConfusionMatrix(counts.astype(np.int64))


def miou(cm: ConfusionMatrix) -> tuple[float, np.ndarray]:
    """Mean IoU over classes present in the prediction or the reference.

    Absent classes get NaN in the per-class vector and are left out of the
    mean; an empty matrix yields NaN.
    """
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    iou = np.full(cm.num_classes, np.nan)
    present = union > 0
    iou[present] = tp[present] / union[present]
    if not np.any(present):
        return float("nan"), iou
    return float(iou[present].mean()), iou
