"""AUC and logloss for CTR evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .core import bce_per_instance


class UndefinedMetricError(ValueError):
    """Raised when AUC is requested for a single-class label set."""


def _class_counts(labels: np.ndarray) -> tuple[int, int]:
    n_pos = int((labels == 1).sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC needs both classes (got {n_pos} positives, {n_neg} negatives)"
        )
    return n_pos, n_neg


def auc(labels, scores) -> float:
    """Mann-Whitney AUC with average ranks for ties, O(n log n)."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = _class_counts(labels)
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_bruteforce(labels, scores) -> float:
    """Pairwise AUC: 1 per correctly ordered pos/neg pair, 0.5 per tie."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = _class_counts(labels)
    pos = scores[labels == 1]
    neg = scores[labels != 1]
    total = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                total += 1.0
            elif sp == sn:
                total += 0.5
    return total / (n_pos * n_neg)


def logloss(labels, probabilities) -> float:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise ValueError("logloss of an empty set")
    return float(np.mean(bce_per_instance(labels, probabilities)))


@dataclass
class EvalReport:
    auc: float | None
    logloss: float
    n_pos: int
    n_neg: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(labels, probabilities) -> EvalReport:
    """AUC (None when undefined) and logloss in one report."""
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    try:
        a = auc(labels, probabilities)
    except UndefinedMetricError:
        a = None
    return EvalReport(auc=a, logloss=logloss(labels, probabilities), n_pos=n_pos, n_neg=int(labels.size - n_pos))
