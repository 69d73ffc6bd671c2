"""Evaluation metrics for segmentation and classification.

Pixel-level Dice/sensitivity/specificity over binarized label maps,
stratified k-fold splitting, multi-class accuracy/precision/recall/F1,
and rank-based one-vs-rest AUC.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .raster import LabelMap


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MultiClassConfusion:
    matrix: np.ndarray
    class_names: tuple

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=np.int64)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError("confusion matrix must be square")
        if mat.min(initial=0) < 0:
            raise ValueError("confusion entries must be non-negative")
        if len(self.class_names) != mat.shape[0]:
            raise ValueError("one class name per matrix row required")
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def support(self) -> np.ndarray:
        """True-sample count per class (row sums)."""
        return self.matrix.sum(axis=1)

    @property
    def total(self) -> int:
        return int(self.matrix.sum())


@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignments: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.assignments, dtype=np.int64)
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if arr.size and (arr.min() < 0 or arr.max() >= self.k):
            raise ValueError("fold indices out of range")
        object.__setattr__(self, "assignments", arr)

    def fold_indices(self, fold: int) -> np.ndarray:
        return np.nonzero(self.assignments == fold)[0]


# ---- segmentation


def binary_seg_metrics(pred: LabelMap, truth: LabelMap):
    """Pixelwise Dice, sensitivity, specificity after binarizing both maps.

    Degenerate denominators resolve to 1.0 when prediction and truth agree
    on the empty set, else 0.0, so batch averages stay total.
    """
    if pred.labels.shape != truth.labels.shape:
        raise ValueError(
            f"prediction {pred.labels.shape} and truth {truth.labels.shape} differ"
        )
    p = pred.labels.ravel() > 0
    t = truth.labels.ravel() > 0
    counts = np.bincount(2 * t + p, minlength=4)
    tn, fp, fn, tp = (int(c) for c in counts)
    conf = ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)

    if tp + fn > 0:
        sensitivity = tp / (tp + fn)
    else:
        sensitivity = 1.0 if fp == 0 else 0.0
    if tn + fp > 0:
        specificity = tn / (tn + fp)
    else:
        specificity = 1.0 if fn == 0 else 0.0
    denom = 2 * tp + fp + fn
    dice = 2 * tp / denom if denom > 0 else 1.0
    return dice, sensitivity, specificity, conf


# ---- cross-validation


def stratified_kfold(labels, k: int, seed: int) -> FoldSplit:
    """Deterministic stratified split; per-class fold sizes differ by <= 1."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("no samples to split")
    rng = np.random.default_rng(seed)
    assignments = np.full(labels.size, -1, dtype=np.int64)
    classes = np.unique(labels)
    for pos, cls in enumerate(classes):
        idx = np.nonzero(labels == cls)[0]
        if idx.size < k:
            raise ValueError(
                f"class {int(cls)} has {idx.size} samples, fewer than k={k}"
            )
        rng.shuffle(idx)
        # rotate the starting fold per class so remainders spread out
        start = pos % k
        assignments[idx] = (start + np.arange(idx.size)) % k
    return FoldSplit(k=k, assignments=assignments)


def average_folds(per_fold):
    """Mean and population standard deviation per metric key across folds."""
    if not per_fold:
        raise ValueError("need at least one fold record")
    keys = list(per_fold[0])
    for record in per_fold[1:]:
        if set(record) != set(keys):
            raise ValueError("fold records carry inconsistent metric keys")
    mean = {}
    sd = {}
    for key in keys:
        values = np.array([float(r[key]) for r in per_fold])
        if np.ptp(values) == 0:
            # identical folds average to the shared value exactly
            mean[key] = float(values[0])
            sd[key] = 0.0
        else:
            mean[key] = float(values.mean())
            sd[key] = float(values.std())
    return mean, sd


# ---- classification


@dataclass(frozen=True)
class ClassificationMetrics:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    per_class: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "weighted_precision": self.weighted_precision,
            "weighted_recall": self.weighted_recall,
            "weighted_f1": self.weighted_f1,
        }


def confusion_from_predictions(truths, preds, class_names) -> MultiClassConfusion:
    truths = np.asarray(truths, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if truths.shape != preds.shape:
        raise ValueError("truth and prediction lists differ in length")
    n = len(class_names)
    if truths.size and (truths.min() < 0 or truths.max() >= n or
                        preds.min() < 0 or preds.max() >= n):
        raise ValueError("class index out of range")
    mat = np.zeros((n, n), dtype=np.int64)
    np.add.at(mat, (truths, preds), 1)
    return MultiClassConfusion(matrix=mat, class_names=tuple(class_names))


def classification_metrics(conf: MultiClassConfusion) -> ClassificationMetrics:
    """Accuracy plus macro and support-weighted precision/recall/F1.

    Zero-denominator precision or recall resolves to 0. Classes with no
    true samples are excluded from the macro averages.
    """
    mat = conf.matrix
    total = conf.total
    if total == 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(mat).astype(np.float64)
    support = conf.support.astype(np.float64)
    predicted = mat.sum(axis=0).astype(np.float64)

    precision = np.divide(diag, predicted, out=np.zeros_like(diag),
                          where=predicted > 0)
    recall = np.divide(diag, support, out=np.zeros_like(diag), where=support > 0)
    pr_sum = precision + recall
    f1 = np.divide(2 * precision * recall, pr_sum, out=np.zeros_like(diag),
                   where=pr_sum > 0)

    live = support > 0
    weights = support[live] / support[live].sum()
    per_class = {
        name: {"precision": float(p), "recall": float(r), "f1": float(f),
               "support": int(s)}
        for name, p, r, f, s in zip(conf.class_names, precision, recall, f1, support)
    }
    return ClassificationMetrics(
        accuracy=float(diag.sum() / total),
        macro_precision=float(precision[live].mean()),
        macro_recall=float(recall[live].mean()),
        macro_f1=float(f1[live].mean()),
        weighted_precision=float((precision[live] * weights).sum()),
        weighted_recall=float((recall[live] * weights).sum()),
        weighted_f1=float((f1[live] * weights).sum()),
        per_class=per_class,
    )


def roc_auc_ovr(scores, truths):
    """One-vs-rest AUC per class via the Mann-Whitney rank statistic.

    Classes without both a positive and a negative sample get NaN and are
    left out of the macro average, with a warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.int64)
    if scores.ndim != 2:
        raise ValueError("expected a 2D score array, one row per sample")
    if scores.shape[0] != truths.shape[0]:
        raise ValueError("scores and truths differ in length")
    n_classes = scores.shape[1]
    per_class = np.full(n_classes, np.nan)
    for cls in range(n_classes):
        positive = truths == cls
        n_pos = int(positive.sum())
        n_neg = positive.size - n_pos
        if n_pos == 0 or n_neg == 0:
            warnings.warn(
                f"class {cls} lacks both positives and negatives; AUC undefined",
                stacklevel=2,
            )
            continue
        ranks = rankdata(scores[:, cls])
        rank_sum = ranks[positive].sum()
        per_class[cls] = (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    defined = ~np.isnan(per_class)
    macro = float(per_class[defined].mean()) if defined.any() else float("nan")
    return per_class, macro
