"""Ranking and calibration metrics for binary CTR predictions."""

from __future__ import annotations

import numpy as np

from .errors import DataError, UndefinedMetricError


def _as_labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.size and not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    return y.astype(np.int64)


def _ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = x.size
    # boundaries of tie groups in sorted order
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], n]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """P(score of a random positive > score of a random negative), ties 1/2.

    Mann-Whitney rank statistic, O(n log n).
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _as_labels(labels).reshape(-1)
    if s.shape != y.shape:
        raise DataError(f"{s.size} scores for {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    r = _ranks(s)
    # exact: rank sums of half-integers are multiples of 1/2
    u = r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def gauc(scores, labels, user_ids) -> float:
    """Per-user AUC averaged with weights equal to each user's click count.

    Users whose examples are all clicks or all non-clicks are skipped.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _as_labels(labels).reshape(-1)
    u = np.asarray(user_ids).reshape(-1)
    if not s.size == y.size == u.size:
        raise DataError("scores, labels and user ids differ in length")
    order = np.argsort(u, kind="mergesort")
    us = u[order]
    bounds = np.flatnonzero(np.r_[True, us[1:] != us[:-1], True])
    num = 0.0
    den = 0.0
    for a, b in zip(bounds[:-1], bounds[1:]):
        idx = order[a:b]
        yy = y[idx]
        pos = int(yy.sum())
        if pos == 0 or pos == yy.size:
            continue
        num += pos * auc(s[idx], yy)
        den += pos
    if den == 0:
        raise UndefinedMetricError("no user has both clicks and non-clicks")
    return float(num / den)


def log_loss(probs, labels) -> float:
    """Mean binary cross-entropy, natural log."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = _as_labels(labels).reshape(-1)
    if p.shape != y.shape:
        raise DataError(f"{p.size} predictions for {y.size} labels")
    if p.size == 0:
        raise UndefinedMetricError("log loss of an empty set")
    if ((p <= 0) | (p >= 1)).any():
        raise DataError("predictions must lie strictly inside (0, 1)")
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def normalized_entropy(logloss: float, p: float) -> float:
    """Log loss divided by the entropy of a constant predictor at training CTR ``p``."""
    if not 0.0 < p < 1.0:
        raise UndefinedMetricError(f"background CTR {p} must lie in (0, 1)")
    return float(logloss / -(p * np.log(p) + (1 - p) * np.log(1 - p)))


def evaluate(probs, labels, user_ids, train_ctr: float) -> dict:
    ll = log_loss(probs, labels)
    return {
        "auc": auc(probs, labels),
        "gauc": gauc(probs, labels, user_ids),
        "logloss": ll,
        "ne": normalized_entropy(ll, train_ctr),
    }
