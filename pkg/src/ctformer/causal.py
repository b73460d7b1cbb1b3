"""Temporal causal decoupling of the final-layer attention matrix.

``B = relu(A @ W_c) * M`` with ``M[i, j] = 1`` iff ``i > j``; rows and columns
at or beyond ``t_valid`` are zeroed as well. Column sums of ``B`` give each
step's downstream impact ``S``, a softmax over valid steps turns them into the
causal attention ``alpha``, and ``L = sum_j alpha_j * H_cfc[j]``.

All functions take batched tensors: ``A (B, T, T)``, ``H_cfc (B, T, d)``.
"""
from __future__ import annotations

import numpy as np

from . import engine as E


def structural_mask(t_max: int) -> np.ndarray:
    """Strictly lower-triangular 0/1 matrix."""
    return np.tril(np.ones((t_max, t_max)), k=-1)


def valid_pair_mask(lengths: np.ndarray, t_max: int) -> np.ndarray:
    """(B, T, T): strictly lower entries with both indices below t_valid."""
    lengths = np.asarray(lengths, dtype=np.int64)
    v = (np.arange(t_max)[None, :] < lengths[:, None]).astype(np.float64)
    return structural_mask(t_max)[None] * v[:, :, None] * v[:, None, :]


def init_causal_head(rng: np.random.Generator, t_max: int, noise: float = 0.01) -> E.Tensor:
    """Identity plus small noise, so B starts as a masked, rectified copy of A."""
    return E.tensor(np.eye(t_max) + noise * rng.standard_normal((t_max, t_max)), requires_grad=True)


def causal_matrix(attn, w_c, lengths) -> E.Tensor:
    attn, w_c = E._as_tensor(attn), E._as_tensor(w_c)
    if attn.ndim != 3 or attn.shape[-1] != attn.shape[-2]:
        raise E.ShapeError(f"causal_matrix: A must be (B, T, T), got {attn.shape}")
    if w_c.shape != (attn.shape[-1], attn.shape[-1]):
        raise E.ShapeError(f"causal_matrix: W_c shape {w_c.shape} does not match A {attn.shape}")
    return E.relu(E.matmul(attn, w_c)) * valid_pair_mask(lengths, attn.shape[-1])


def impact_scores(b: E.Tensor, lengths) -> E.Tensor:
    """Column sums of B (the valid-pair mask already zeroes columns past t_valid)."""
    return E.sum_(b, axis=-2)


def valid_steps(lengths, t_max: int) -> np.ndarray:
    return np.arange(t_max)[None, :] < np.asarray(lengths)[:, None]


def causal_attention(s: E.Tensor, lengths) -> E.Tensor:
    lengths = np.asarray(lengths)
    if np.any(lengths < 1):
        raise ValueError("causal_attention: t_valid must be >= 1")
    return E.row_softmax_masked(s, valid_steps(lengths, s.shape[-1]))


def local_vector(alpha: E.Tensor, h_cfc) -> E.Tensor:
    h_cfc = E._as_tensor(h_cfc)
    return E.sum_(E.reshape(alpha, alpha.shape + (1,)) * h_cfc, axis=-2)


def decouple(attn, h_cfc, w_c, lengths) -> dict[str, E.Tensor]:
    """B, S, alpha and L in one pass."""
    b = causal_matrix(attn, w_c, lengths)
    s = impact_scores(b, lengths)
    alpha = causal_attention(s, lengths)
    return {"B": b, "S": s, "alpha": alpha, "L": local_vector(alpha, h_cfc)}
