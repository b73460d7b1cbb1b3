"""Pure numpy versions of the hot kernels. Same signatures as ``_ckernels``."""
from __future__ import annotations

import numpy as np


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def cfc_scan_forward(xu, w_bh, w_heads, b_heads, dt, lengths):
    """Run the closed-form continuous-time recurrence over a padded batch.

    xu      (B, T, U) input half of the backbone pre-activation, bias included
    w_bh    (D, U)    hidden-to-backbone weights
    w_heads (U, 3D)   fused f | g | k head weights, b_heads (3D,)
    dt      (B, T)    elapsed hours per step
    lengths (B,)      valid steps per row; outputs beyond are zero

    Returns ``(h, cache)`` where cache = (a, f, g, k, gate, h_raw).
    """
    bsz, tmax, units = xu.shape
    d = w_bh.shape[0]
    n = int(lengths.max()) if bsz else 0
    a = np.zeros((bsz, tmax, units))
    f = np.zeros((bsz, tmax, d))
    g = np.zeros((bsz, tmax, d))
    k = np.zeros((bsz, tmax, d))
    gate = np.zeros((bsz, tmax, d))
    h = np.zeros((bsz, tmax, d))
    hp = np.zeros((bsz, d))
    for t in range(n):
        pre = xu[:, t] + hp @ w_bh if t else xu[:, t].copy()
        at = np.tanh(pre)
        heads = at @ w_heads + b_heads
        ft = heads[:, :d]
        gt = np.tanh(heads[:, d:2 * d])
        kt = np.tanh(heads[:, 2 * d:])
        st = _sigmoid(-ft * dt[:, t:t + 1])
        hp = st * gt + (1.0 - st) * kt
        a[:, t], f[:, t], g[:, t], k[:, t], gate[:, t], h[:, t] = at, ft, gt, kt, st, hp
    valid = np.arange(tmax)[None, :] < lengths[:, None]
    h_raw = h
    return h_raw * valid[:, :, None], (a, f, g, k, gate, h_raw)


def cfc_scan_backward(dh_out, w_bh, w_heads, dt, lengths, cache):
    """Backpropagate through :func:`cfc_scan_forward`.

    Returns ``(d_xu, d_w_bh, d_w_heads, d_b_heads)``.
    """
    a, f, g, k, gate, h = cache
    bsz, tmax, units = a.shape
    d = w_bh.shape[0]
    n = int(lengths.max()) if bsz else 0
    valid = (np.arange(tmax)[None, :] < lengths[:, None])[:, :, None]
    dh_out = dh_out * valid
    d_xu = np.zeros_like(a)
    d_wbh = np.zeros_like(w_bh)
    d_wh = np.zeros_like(w_heads)
    d_bh = np.zeros(w_heads.shape[1])
    dhn = np.zeros((bsz, d))
    for t in range(n - 1, -1, -1):
        dh = dh_out[:, t] + dhn
        st, gt, kt = gate[:, t], g[:, t], k[:, t]
        dpre_gate = dh * (gt - kt) * st * (1.0 - st)
        dheads = np.concatenate([
            -dpre_gate * dt[:, t:t + 1],
            dh * st * (1.0 - gt * gt),
            dh * (1.0 - st) * (1.0 - kt * kt),
        ], axis=1)
        d_bh += dheads.sum(axis=0)
        at = a[:, t]
        d_wh += at.T @ dheads
        dpre = (dheads @ w_heads.T) * (1.0 - at * at)
        d_xu[:, t] = dpre
        if t:
            d_wbh += h[:, t - 1].T @ dpre
            dhn = dpre @ w_bh.T
    return d_xu, d_wbh, d_wh, d_bh


def feature_deltas(timestamps, mask, lengths):
    """Hours since each feature's last observation, batched.

    timestamps (N, T), mask (N, T, F), lengths (N,) -> (N, T, F); zero at
    step 0 and beyond each row's length.
    """
    nb, tmax, nf = mask.shape
    out = np.zeros((nb, tmax, nf))
    valid = np.arange(tmax)[None, :] < lengths[:, None]
    step = np.zeros((nb, tmax))
    step[:, 1:] = np.diff(timestamps, axis=1)
    for t in range(1, tmax):
        gap = step[:, t:t + 1]
        out[:, t] = np.where(mask[:, t - 1] > 0, gap, out[:, t - 1] + gap)
    return out * valid[:, :, None]
