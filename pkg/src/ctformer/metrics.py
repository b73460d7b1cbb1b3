"""Threshold-free ranking metrics: AUROC, average precision, curve points.

Ties: AUROC counts a tied positive/negative pair as 1/2 (mid-ranks). Average
precision evaluates precision once per distinct score, at the end of each
tied block, so every positive in a block gets the same precision; with all
scores equal it is exactly the prevalence. Sorting is stable by original
index so curve exports are reproducible.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


def _check(scores, labels, need_neg: bool = True):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    y = y.astype(np.int64)
    npos = int(y.sum())
    if npos == 0:
        raise ValueError("need at least one positive")
    if need_neg and npos == y.size:
        raise ValueError("need at least one negative")
    return s, y


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties count 1/2)."""
    s, y = _check(scores, labels)
    r = rankdata(s)  # mid-ranks
    npos = int(y.sum())
    nneg = y.size - npos
    # twice the Mann-Whitney U is an integer, so the division is exact
    u2 = 2.0 * r[y == 1].sum() - npos * (npos + 1)
    return float(u2 / (2.0 * npos * nneg))


def auprc(scores, labels) -> float:
    """Average precision: mean of precision-at-rank over the positives."""
    s, y = _check(scores, labels, need_neg=False)
    order = np.argsort(-s, kind="stable")
    s_sorted, hits = s[order], y[order]
    tp = np.cumsum(hits)
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), y.size - 1]
    prec = tp[last] / (last + 1)
    gained = np.diff(np.r_[0, tp[last]])
    return float((gained * prec).sum() / tp[-1])


def curve_points(scores, labels, kind: str = "roc") -> list[tuple[float, float, float]]:
    """(threshold, x, y) per distinct threshold, endpoints included.

    ROC: x = FPR, y = TPR, starting at (0, 0) with threshold +inf.
    PR: x = recall, y = precision, starting at recall 0 / precision 1.
    """
    if kind not in ("roc", "pr"):
        raise ValueError(f"kind must be 'roc' or 'pr', got {kind!r}")
    s, y = _check(scores, labels, need_neg=(kind == "roc"))
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), y.size - 1]
    npos, nneg = tp[-1], fp[-1]
    pts = []
    if kind == "roc":
        pts.append((float("inf"), 0.0, 0.0))
        for i in last:
            pts.append((float(s_sorted[i]), fp[i] / nneg, tp[i] / npos))
    else:
        pts.append((float("inf"), 0.0, 1.0))
        for i in last:
            pts.append((float(s_sorted[i]), tp[i] / npos, tp[i] / (i + 1)))
    return [(t, float(a), float(b)) for t, a, b in pts]


def trapezoid_area(points) -> float:
    xs = np.array([p[1] for p in points])
    ys = np.array([p[2] for p in points])
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))


def write_curve_csv(path, points) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "x", "y"])
        for t, a, b in points:
            w.writerow([repr(t), repr(a), repr(b)])
