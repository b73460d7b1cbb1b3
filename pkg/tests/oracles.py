"""Slow, independent reference implementations used only by the tests.

Each oracle is written from the definitions with plain loops and no code
shared with the package, so agreement is evidence rather than tautology.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def deltas_loop(ts, mask):
    """Per-feature time since last observation, straight from the recurrence."""
    ts = list(ts)
    t_valid = len(ts)
    n_rows, n_feat = len(mask), len(mask[0])
    fd = [[0.0] * n_feat for _ in range(n_rows)]
    step = [0.0] * n_rows
    for t in range(1, t_valid):
        gap = ts[t] - ts[t - 1]
        step[t] = gap
        for f in range(n_feat):
            fd[t][f] = gap if mask[t - 1][f] == 1 else fd[t - 1][f] + gap
    return np.array(fd), np.array(step)


def kdigo_brute(ts, cr, ur):
    """Enumerate every observation pair and every urine run; return (label, onset)."""
    n = len(ts)
    obs_cr = [i for i in range(n) if not math.isnan(cr[i])]
    if not obs_cr:
        raise ValueError("no creatinine")
    base_i = obs_cr[0]
    candidates = []
    for b in obs_cr:
        for a in obs_cr:
            if ts[a] < ts[b] and ts[b] - ts[a] <= 48.0 + 1e-9 and cr[b] - cr[a] >= 0.3 - 1e-9:
                candidates.append(ts[b])
        if ts[b] - ts[base_i] <= 168.0 + 1e-9 and cr[b] >= 1.5 * cr[base_i] - 1e-9:
            candidates.append(ts[b])
    obs_ur = [i for i in range(n) if not math.isnan(ur[i])]
    for start_pos, s in enumerate(obs_ur):
        for end in obs_ur[start_pos:]:
            run = [i for i in obs_ur if ts[s] <= ts[i] <= ts[end]]
            if all(ur[i] < 0.5 for i in run) and ts[end] - ts[s] >= 6.0 - 1e-9:
                candidates.append(ts[end])
    if not candidates:
        return 0, None
    return 1, min(candidates)


def auroc_pairs(scores, labels):
    """Fraction of (positive, negative) pairs ranked correctly, ties worth 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins2 = 0
    for p in pos:
        for q in neg:
            wins2 += 2 if p > q else (1 if p == q else 0)
    return wins2 / (2.0 * len(pos) * len(neg))


def average_precision_loop(scores, labels):
    """Sum over thresholds of recall gain times precision at that threshold."""
    npos = sum(labels)
    total, prev_recall = 0.0, 0.0
    for thr in sorted(set(scores), reverse=True):
        sel = [i for i in range(len(scores)) if scores[i] >= thr]
        tp = sum(labels[i] for i in sel)
        recall = tp / npos
        total += (recall - prev_recall) * (tp / len(sel))
        prev_recall = recall
    return total


def shapley_permutations(n, value):
    """Average marginal contribution over all n! orderings (n <= 7)."""
    phi = [0.0] * n
    perms = list(itertools.permutations(range(n)))
    for perm in perms:
        coalition = set()
        prev = value(frozenset())
        for p in perm:
            coalition.add(p)
            cur = value(frozenset(coalition))
            phi[p] += cur - prev
            prev = cur
    return np.array(phi) / len(perms)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def cfc_step_loop(u, h, dt, w_bb, b_bb, w_f, b_f, w_g, b_g, w_k, b_k):
    """One closed-form update with explicit per-head matrices."""
    z = np.concatenate([u, h])
    a = np.tanh(z @ w_bb + b_bb)
    f = a @ w_f + b_f
    g = np.tanh(a @ w_g + b_g)
    k = np.tanh(a @ w_k + b_k)
    gate = sigmoid(-f * dt)
    return gate * g + (1.0 - gate) * k


def causal_loop(attn, w_c, t_valid):
    """B, S, alpha from the definitions with explicit index loops."""
    t = attn.shape[0]
    aw = attn @ w_c
    b = np.zeros((t, t))
    for i in range(t_valid):
        for j in range(i):
            b[i, j] = max(aw[i, j], 0.0)
    s = np.array([sum(b[i, j] for i in range(t)) for j in range(t)])
    e = np.exp(s[:t_valid] - s[:t_valid].max())
    alpha = np.zeros(t)
    alpha[:t_valid] = e / e.sum()
    return b, s, alpha
