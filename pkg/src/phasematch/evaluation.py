"""Metrics for match files and classifier scores."""
from __future__ import annotations

import numpy as np

from .dataset import Transform


def match_precision(rows, gt: Transform, tolerance: float):
    """Fraction of accepted matches whose B point lies within ``tolerance`` of gt(A point).

    Returns ``(precision, no_matches)``; an empty match list scores 0 with the flag set.
    """
    if not rows:
        return 0.0, True
    pa = np.array([(r[0], r[1]) for r in rows], dtype=np.float64)
    pb = np.array([(r[2], r[3]) for r in rows], dtype=np.float64)
    err = np.hypot(*(gt.apply(pa) - pb).T)
    return float(np.mean(err <= tolerance)), False


def repeatability(kps_a, kps_b, gt: Transform, radius: float) -> float:
    if not kps_a:
        return 0.0
    if not kps_b:
        return 0.0
    pa = gt.apply(np.array([(k.x, k.y) for k in kps_a], dtype=np.float64))
    pb = np.array([(k.x, k.y) for k in kps_b], dtype=np.float64)
    d = np.hypot(pa[:, None, 0] - pb[None, :, 0], pa[:, None, 1] - pb[None, :, 1])
    return float(np.mean(d.min(axis=1) <= radius))


def roc_curve(scores, labels):
    """ROC points (fpr, tpr) sweeping the threshold from +inf down, plus trapezoid AUC.

    Tied scores are crossed in one step, so the curve is exact for ties.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels) > 0
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], pos[order]
    tp = np.cumsum(p)
    fp = np.cumsum(~p)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return fpr, tpr, auc
