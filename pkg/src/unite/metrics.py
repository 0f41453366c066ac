"""Imbalance-aware classification metrics and a one-sided paired t-test."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["EvalResult", "f1", "cohens_kappa", "pr_auc", "evaluate", "paired_t_test", "student_t_cdf", "student_t_sf"]


@dataclass(frozen=True)
class EvalResult:
    f1: float
    kappa: float
    pr_auc: float
    n_negative: int
    n_positive: int


def _binary_pair(labels, predictions) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels).astype(int).ravel()
    p = np.asarray(predictions).astype(int).ravel()
    if y.size == 0:
        raise ValueError("empty input")
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {y.size} labels vs {p.size} predictions")
    if not (np.isin(y, (0, 1)).all() and np.isin(p, (0, 1)).all()):
        raise ValueError("labels and predictions must be binary")
    return y, p


def f1(labels, predictions) -> float:
    """Harmonic mean of precision and recall on the positive class (0 when both vanish)."""
    y, p = _binary_pair(labels, predictions)
    tp = int(np.sum((y == 1) & (p == 1)))
    fp = int(np.sum((y == 0) & (p == 1)))
    fn = int(np.sum((y == 1) & (p == 0)))
    if tp == 0:
        return 0.0
    prec = tp / (tp + fp)
    rec = tp / (tp + fn)
    return 2.0 * prec * rec / (prec + rec)


def cohens_kappa(labels, predictions) -> float:
    y, p = _binary_pair(labels, predictions)
    n = y.size
    p_o = float(np.mean(y == p))
    p_e = sum(float(np.sum(y == c)) * float(np.sum(p == c)) for c in (0, 1)) / (n * n)
    if p_e == 1.0:
        return 0.0
    return (p_o - p_e) / (1.0 - p_e)


def pr_auc(labels, scores) -> float:
    """Step-sum area under the precision-recall curve.

    Operating points are the distinct score values in descending order; tied
    scores enter together. The area is ``sum_k Prec(k) * (Rec(k) - Rec(k-1))``.
    """
    y = np.asarray(labels).astype(int).ravel()
    s = np.asarray(scores, dtype=float).ravel()
    if y.shape != s.shape:
        raise ValueError("length mismatch between labels and scores")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("pr_auc needs at least one positive label")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each tie group
    ends = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    tp = np.cumsum(y_sorted)[ends]
    n_flagged = ends + 1
    precision = tp / n_flagged
    recall = tp / n_pos
    delta = np.diff(np.r_[0.0, recall])
    return float(np.sum(precision * delta))


def evaluate(labels, scores, threshold: float = 0.5) -> EvalResult:
    y = np.asarray(labels).astype(int)
    s = np.asarray(scores, dtype=float)
    pred = (s >= threshold).astype(int)
    return EvalResult(
        f1=f1(y, pred),
        kappa=cohens_kappa(y, pred),
        pr_auc=pr_auc(y, s) if y.sum() > 0 else float("nan"),
        n_negative=int(np.sum(y == 0)),
        n_positive=int(np.sum(y == 1)),
    )


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-15) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """Upper tail ``P(T > t)`` of Student's t with ``df`` degrees of freedom."""
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
    return tail if t >= 0 else 1.0 - tail


def student_t_cdf(t: float, df: float) -> float:
    return student_t_sf(-t, df)


def paired_t_test(diffs) -> tuple[float, float]:
    """One-sample t statistic of ``diffs`` and the one-sided p-value for mean > 0."""
    d = np.asarray(diffs, dtype=float).ravel()
    if d.size < 2:
        raise ValueError("paired_t_test needs at least two differences")
    sd = float(np.std(d, ddof=1))
    mean = float(np.mean(d))
    if sd <= 1e-12 * max(1.0, abs(mean)):
        raise ValueError("degenerate differences (zero variance)")
    t = mean / (sd / math.sqrt(d.size))
    return t, student_t_sf(t, d.size - 1)
