"""Task metrics and rank correlation."""
from __future__ import annotations

from typing import Mapping

import numpy as np
from scipy.stats import rankdata

from .data import Metric


def _pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=float).reshape(-1)
    y = np.asarray(labels, dtype=float).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(y)} labels")
    if len(p) < 2:
        raise ValueError("metrics need at least 2 items")
    return p, y


def accuracy(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(p == y))


def mcc(preds, labels) -> float:
    """Matthews correlation (multiclass form); 0 when any marginal is degenerate."""
    p, y = _pair(preds, labels)
    classes = np.union1d(p, y)
    idx = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)))
    for a, b in zip(y, p):
        cm[idx[a], idx[b]] += 1
    t = cm.sum(axis=1)
    pk = cm.sum(axis=0)
    c = np.trace(cm)
    s = cm.sum()
    denom = np.sqrt((s * s - pk @ pk) * (s * s - t @ t))
    if denom == 0:
        return 0.0
    return float((c * s - t @ pk) / denom)


def rmse(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.sqrt(np.mean((p - y) ** 2)))


def spearman(x, y) -> float:
    """Tied-rank Spearman correlation; 0 when either side is constant."""
    a, b = _pair(x, y)
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0:
        return 0.0
    return float(np.clip((ra * rb).sum() / denom, -1.0, 1.0))


def spearman_rho(a: Mapping[str, float], b: Mapping[str, float]) -> float:
    """Spearman correlation between two id -> score (or rank) maps over the same ids."""
    if set(a) != set(b):
        only_a = sorted(set(a) - set(b))[:3]
        only_b = sorted(set(b) - set(a))[:3]
        raise ValueError(f"id sets differ (only left: {only_a}, only right: {only_b})")
    ids = sorted(a)
    return spearman([a[i] for i in ids], [b[i] for i in ids])


def metric(preds, labels, kind: Metric | str) -> float:
    kind = Metric(kind)
    if kind is Metric.ACCURACY:
        return accuracy(preds, labels)
    if kind is Metric.MCC:
        return mcc(preds, labels)
    if kind is Metric.RMSE:
        return rmse(preds, labels)
    return spearman(preds, labels)
