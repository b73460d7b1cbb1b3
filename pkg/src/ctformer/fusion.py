"""Gated fusion of global context G and local causal vector L, final head, Stage-2 loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .causal import valid_pair_mask


@dataclass
class FusionParams:
    w_g: E.Tensor     # (d, 2d)
    b_g: E.Tensor     # (d,)
    w_cls: E.Tensor   # (1, d)
    b_cls: E.Tensor   # (1,)

    def named(self) -> dict[str, E.Tensor]:
        return {"w_g": self.w_g, "b_g": self.b_g, "w_cls": self.w_cls, "b_cls": self.b_cls}


def init_fusion(rng: np.random.Generator, d: int) -> FusionParams:
    lim_g = 1.0 / np.sqrt(2 * d)
    lim_c = 1.0 / np.sqrt(d)
    return FusionParams(
        w_g=E.tensor(rng.uniform(-lim_g, lim_g, (d, 2 * d)), requires_grad=True),
        b_g=E.tensor(np.zeros(d), requires_grad=True),
        w_cls=E.tensor(rng.uniform(-lim_c, lim_c, (1, d)), requires_grad=True),
        b_cls=E.tensor(np.zeros(1), requires_grad=True),
    )


def gated_fusion(g_ctx, l_vec, params: FusionParams) -> tuple[E.Tensor, E.Tensor]:
    """Return ``(gate, h_final)`` with ``gate = sigmoid(W_g [G; L] + b_g)``."""
    g_ctx, l_vec = E._as_tensor(g_ctx), E._as_tensor(l_vec)
    d = params.b_g.shape[0]
    if g_ctx.shape[-1] != d or l_vec.shape[-1] != d:
        raise E.ShapeError(f"gated_fusion: G {g_ctx.shape} / L {l_vec.shape} vs gate width {d}")
    gate = E.sigmoid(E.matmul(E.concat([g_ctx, l_vec], axis=-1), params.w_g.T) + params.b_g)
    return gate, gate * g_ctx + (1.0 - gate) * l_vec


def predict(h_final, params: FusionParams) -> E.Tensor:
    """``sigmoid(W_cls h + b_cls)``; shape (B,) for a batch, (1,) for one vector."""
    h_final = E._as_tensor(h_final)
    z = E.matmul(h_final, params.w_cls.T) + params.b_cls
    return E.sigmoid(E.reshape(z, z.shape[:-1]) if h_final.ndim > 1 else z)


def stage2_loss(y_hat: E.Tensor, y, b: E.Tensor, lam: float, lengths,
                pos_weight: float = 1.0) -> E.Tensor:
    """Cross entropy plus ``lam`` times the mean |B| over valid strictly-lower entries.

    The penalty is averaged per patient, then over the batch.
    """
    if lam < 0:
        raise ValueError(f"stage2_loss: lambda must be >= 0, got {lam}")
    ce = E.binary_cross_entropy(y_hat, y, pos_weight=pos_weight)
    if lam == 0:
        return ce
    b = E._as_tensor(b)
    if b.ndim == 2:
        b = E.reshape(b, (1,) + b.shape)
        lengths = np.atleast_1d(lengths)
    penalty = E.mean(E.l1_masked(b, valid_pair_mask(lengths, b.shape[-1])))
    return ce + penalty * lam
