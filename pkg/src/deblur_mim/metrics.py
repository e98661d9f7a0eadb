"""Binary classification metrics: ACC, F1, AUROC."""

from __future__ import annotations

import numpy as np


class MetricError(ValueError):
    pass


def _validate(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size == 0:
        raise MetricError("empty score list")
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores but {y.size} labels")
    if not np.isfinite(s).all():
        raise MetricError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    return s, y.astype(int)


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of items where ``score >= threshold`` agrees with the label."""
    s, y = _validate(scores, labels)
    return float(np.mean((s >= threshold).astype(int) == y))


def confusion(scores, labels, threshold: float = 0.5) -> tuple[int, int, int, int]:
    s, y = _validate(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    return tp, fp, fn, tn


def f1(scores, labels, threshold: float = 0.5) -> float:
    """``2TP / (2TP + FP + FN)``; 0 when nothing is predicted or present."""
    tp, fp, fn, _ = confusion(scores, labels, threshold)
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def _average_ranks(s: np.ndarray) -> np.ndarray:
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s))
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j + 1 < n and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counted half."""
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC is undefined when only one class is present")
    ranks = _average_ranks(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def all_metrics(scores, labels, threshold: float = 0.5) -> dict:
    return {
        "acc": accuracy(scores, labels, threshold),
        "f1": f1(scores, labels, threshold),
        "auroc": auroc(scores, labels),
    }
