"""Causal-masked pre-norm transformer over CfC states.

No positional encoding is added: elapsed-time information already lives in
the CfC states. Attention at (i, j) is allowed only for ``j <= i`` and
``j < t_valid``. The final layer's head-averaged attention ``A`` and the
final valid row ``G`` of the output are exposed for the causal stage.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as E


@dataclass
class TransformerParams:
    n_heads: int
    layers: list[dict[str, E.Tensor]] = field(default_factory=list)
    ln_f_g: E.Tensor | None = None
    ln_f_b: E.Tensor | None = None

    @property
    def d_model(self) -> int:
        return self.ln_f_g.shape[0]

    def named(self) -> dict[str, E.Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update({f"layer{i}.{k}": v for k, v in layer.items()})
        out["ln_f_g"], out["ln_f_b"] = self.ln_f_g, self.ln_f_b
        return out


@dataclass
class AttentionOutput:
    h_trans: E.Tensor   # (B, T, d)
    attn: E.Tensor      # (B, T, T), rows/cols beyond t_valid are 0
    g: E.Tensor         # (B, d) = h_trans[b, t_valid[b] - 1]


def init_transformer(rng: np.random.Generator, d_model: int, n_layers: int = 3,
                     n_heads: int = 4, ff_dim: int | None = None) -> TransformerParams:
    if d_model % n_heads:
        raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
    ff_dim = ff_dim or 4 * d_model

    def uni(fan_in, shape):
        lim = 1.0 / np.sqrt(fan_in)
        return E.tensor(rng.uniform(-lim, lim, shape), requires_grad=True)

    def const(v, n):
        return E.tensor(np.full(n, v, dtype=np.float64), requires_grad=True)

    layers = []
    for _ in range(n_layers):
        layers.append({
            "ln1_g": const(1.0, d_model), "ln1_b": const(0.0, d_model),
            "w_qkv": uni(d_model, (d_model, 3 * d_model)), "b_qkv": const(0.0, 3 * d_model),
            "w_o": uni(d_model, (d_model, d_model)), "b_o": const(0.0, d_model),
            "ln2_g": const(1.0, d_model), "ln2_b": const(0.0, d_model),
            "w_ff1": uni(d_model, (d_model, ff_dim)), "b_ff1": const(0.0, ff_dim),
            "w_ff2": uni(ff_dim, (ff_dim, d_model)), "b_ff2": const(0.0, d_model),
        })
    return TransformerParams(n_heads, layers, const(1.0, d_model), const(0.0, d_model))


def attention_mask(lengths: np.ndarray, t_max: int) -> np.ndarray:
    """(B, T, T) boolean: True where step i may attend to step j."""
    i = np.arange(t_max)[:, None]
    j = np.arange(t_max)[None, :]
    return (j <= i)[None] & (j[None] < lengths[:, None, None])


def _block(x: E.Tensor, layer: dict[str, E.Tensor], mask: np.ndarray, n_heads: int):
    bsz, tmax, d = x.shape
    dh = d // n_heads
    y = E.layer_norm(x, layer["ln1_g"], layer["ln1_b"])
    qkv = E.matmul(y, layer["w_qkv"]) + layer["b_qkv"]

    def heads(t):
        return E.swapaxes(E.reshape(t, (bsz, tmax, n_heads, dh)), 1, 2)

    q, k, v = heads(qkv[..., :d]), heads(qkv[..., d:2 * d]), heads(qkv[..., 2 * d:])
    logits = E.matmul(q, E.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    p = E.row_softmax_masked(logits, mask[:, None])
    o = E.reshape(E.swapaxes(E.matmul(p, v), 1, 2), (bsz, tmax, d))
    x = x + E.matmul(o, layer["w_o"]) + layer["b_o"]
    y = E.layer_norm(x, layer["ln2_g"], layer["ln2_b"])
    x = x + E.matmul(E.relu(E.matmul(y, layer["w_ff1"]) + layer["b_ff1"]), layer["w_ff2"]) + layer["b_ff2"]
    return x, p


def encode(h_cfc: E.Tensor, lengths: np.ndarray, params: TransformerParams) -> AttentionOutput:
    h_cfc = E._as_tensor(h_cfc)
    if h_cfc.ndim == 2:
        raise E.ShapeError("encode expects a batch (B, T, d); add a leading axis")
    if h_cfc.shape[-1] != params.d_model:
        raise E.ShapeError(f"encode: H_cfc width {h_cfc.shape[-1]} != d_model {params.d_model}")
    lengths = np.asarray(lengths, dtype=np.int64)
    if np.any(lengths < 1):
        raise ValueError("encode: t_valid must be >= 1")
    bsz, tmax, _ = h_cfc.shape
    mask = attention_mask(lengths, tmax)
    valid = (np.arange(tmax)[None, :] < lengths[:, None]).astype(np.float64)
    x = h_cfc
    p = None
    for layer in params.layers:
        x, p = _block(x, layer, mask, params.n_heads)
    h = E.layer_norm(x, params.ln_f_g, params.ln_f_b) * valid[:, :, None]
    if p is None:
        attn = E.tensor(mask / mask.sum(axis=-1, keepdims=True))
    else:
        attn = E.mean(p, axis=1)
    attn = attn * valid[:, :, None]
    g = h[np.arange(bsz), lengths - 1]
    return AttentionOutput(h, attn, g)


def stage1_logit(g: E.Tensor, w: E.Tensor, b: E.Tensor) -> E.Tensor:
    """Stage-1 probability ``sigmoid(w . G + b)`` per row of ``g (B, d)``."""
    return E.sigmoid(E.reshape(E.matmul(g, E.reshape(w, (-1, 1))), (-1,)) + b)
