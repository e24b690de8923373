"""Threshold and ranking metrics for binary causality predictions."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Sequence

import numpy as np
from scipy.stats import rankdata

__all__ = ["MetricsReport", "confusion_counts", "auroc", "auprc", "compute_metrics"]


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auroc: float
    auprc: float
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self) -> Dict:
        return asdict(self)


def confusion_counts(scores: Sequence[float], labels: Sequence[int],
                     threshold: float = 0.5):
    """Predict positive when score >= threshold (ties go to causal)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    pred = (s >= threshold).astype(np.intp)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    tn = int(((pred == 0) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    return tp, fp, tn, fn


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a random positive outranks a random negative, ties as 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc is undefined with a single class")
    ranks = rankdata(s)  # average ranks handle ties as 1/2 wins
    pos_rank_sum = ranks[y == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average-precision area over descending distinct score thresholds."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise ValueError("auprc needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == 0)
    # keep only the last index of each tied score group (one point per threshold)
    last = np.flatnonzero(np.diff(s, append=-np.inf) != 0.0)
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def compute_metrics(scores: Sequence[float], labels: Sequence[int]) -> MetricsReport:
    tp, fp, tn, fn = confusion_counts(scores, labels)
    total = tp + fp + tn + fn
    accuracy = (tp + tn) / total if total else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricsReport(accuracy=accuracy, precision=precision, recall=recall,
                         f1=f1, auroc=auroc(scores, labels), auprc=auprc(scores, labels),
                         tp=tp, fp=fp, tn=tn, fn=fn)
