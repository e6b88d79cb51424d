"""Classification metrics.

Ranking metrics raise :class:`UndefinedMetricError` when only one class is
present; the bootstrap relies on that to redraw degenerate resamples.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import rankdata


class AbsentClassWarning(UserWarning):
    pass


class UndefinedMetricError(ValueError):
    pass


def _as_int(a) -> np.ndarray:
    return np.asarray(a).astype(np.int64).ravel()


def confusion_counts(labels, preds, num_classes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class true positives, false positives and false negatives."""
    y, p = _as_int(labels), _as_int(preds)
    if y.size == 0:
        raise ValueError("empty input")
    if y.shape != p.shape:
        raise ValueError("labels and predictions differ in length")
    if y.min() < 0 or p.min() < 0 or y.max() >= num_classes or p.max() >= num_classes:
        raise ValueError(f"labels/predictions must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    tp = np.diag(cm)
    return tp, cm.sum(axis=0) - tp, cm.sum(axis=1) - tp


def per_class_f1(labels, preds, num_classes: int) -> np.ndarray:
    tp, fp, fn = confusion_counts(labels, preds, num_classes)
    denom = 2 * tp + fp + fn
    if np.any(denom == 0):
        warnings.warn("class absent from both labels and predictions; its F1 is set to 0", AbsentClassWarning,
                      stacklevel=3)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def macro_f1(labels, preds, num_classes: int) -> float:
    return float(per_class_f1(labels, preds, num_classes).mean())


def micro_f1(labels, preds, num_classes: int) -> float:
    tp, fp, fn = confusion_counts(labels, preds, num_classes)
    denom = 2 * tp.sum() + fp.sum() + fn.sum()
    return float(2 * tp.sum() / denom) if denom else 0.0


def f1_binary(labels, preds) -> float:
    """F1 of the positive class (label 1)."""
    return float(per_class_f1(labels, preds, 2)[1])


def accuracy(labels, preds) -> float:
    y, p = _as_int(labels), _as_int(preds)
    if y.size == 0:
        raise ValueError("empty input")
    return float(np.mean(y == p))


def _binary_inputs(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    y = _as_int(labels)
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise ValueError("labels and scores differ in length")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("binary labels must be 0 or 1")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetricError("ranking metric needs at least one positive and one negative")
    return y, s


def auroc(labels, scores) -> float:
    """Probability that a random positive outscores a random negative; ties count one half."""
    y, s = _binary_inputs(labels, scores)
    ranks = rankdata(s)  # average ranks handle ties
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def aupr(labels, scores) -> float:
    """Average precision with step interpolation.

    Tied scores form one threshold, so every positive in a tie block gets the
    precision measured at the end of that block.
    """
    y, s = _binary_inputs(labels, scores)
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp_cum = np.cumsum(y_sorted)
    # last index of each tie block
    block_end = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    tp_at = tp_cum[block_end]
    precision = tp_at / (block_end + 1)
    new_pos = np.diff(np.r_[0, tp_at])
    return float((new_pos * precision).sum() / y.sum())


def macro_auroc(labels, score_matrix, num_classes: int) -> float:
    """One-vs-rest AUROC per class, unweighted mean."""
    y = _as_int(labels)
    S = np.asarray(score_matrix, dtype=np.float64)
    if S.shape != (y.size, num_classes):
        raise ValueError(f"score matrix shape {S.shape} != ({y.size}, {num_classes})")
    return float(np.mean([auroc((y == c).astype(int), S[:, c]) for c in range(num_classes)]))
