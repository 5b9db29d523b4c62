"""ROC AUC, average precision and corpus cross-entropy.

Scores are "higher = more relevant"; labels are 0/1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PROB_CLAMP = 1e-12


class UndefinedMetricError(ValueError):
    pass


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.size} scores vs {y.size} labels")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg), ties counted one half."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    s_sorted = s[order]
    # 1-based midranks over tie groups
    starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
    ends = np.r_[starts[1:], s.size]
    group_rank = (starts + 1 + ends) / 2.0
    ranks = np.empty(s.size)
    ranks[order] = np.repeat(group_rank, ends - starts)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Mean precision at each positive's rank.

    Ranking is descending score with ties kept in input order (stable sort on
    ``(-score, index)``); no interpolation.
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    precisions = np.arange(1, n_pos + 1) / ranks
    return math.fsum(precisions.tolist()) / n_pos


def corpus_cross_entropy(probabilities, labels) -> float:
    """Mean negative log-likelihood of the true label; ``probabilities`` are P(label == 1)."""
    p, y = _check(probabilities, labels)
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_true = np.where(y == 1, p, 1.0 - p)
    if p_true.size == 0:
        raise UndefinedMetricError("cross-entropy of an empty set")
    return -math.fsum(math.log(v) for v in p_true.tolist()) / p_true.size


def positive_probability(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


@dataclass
class EvalRecord:
    roc_auc: float
    avg_prec: float
    ce: float
    n: int

    def format(self, name: str = "") -> str:
        """Tab-separated record: rounded x100 AUC/AvgPrec and 4-decimal CE, then raw values."""
        head = f"{name}\t" if name else ""
        return (
            f"{head}roc_auc={100 * self.roc_auc:.4f}\tavg_prec={100 * self.avg_prec:.4f}\tce={self.ce:.4f}"
            f"\traw_roc_auc={self.roc_auc!r}\traw_avg_prec={self.avg_prec!r}\traw_ce={self.ce!r}\tn={self.n}"
        )


def evaluate_logits(logits: np.ndarray, labels) -> EvalRecord:
    p = positive_probability(logits)
    z = np.asarray(logits, dtype=np.float64)
    score = z[:, 1] - z[:, 0]
    return EvalRecord(roc_auc(score, labels), average_precision(score, labels),
                      corpus_cross_entropy(p, labels), len(p))
