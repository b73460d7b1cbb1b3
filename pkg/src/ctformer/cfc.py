"""Closed-form continuous-time (CfC) encoder and an LTC ODE reference integrator.

Per step the cell sees ``z = [u_t; h_{t-1}]`` and computes a shared backbone
``a = tanh(W z + b)`` followed by three heads: ``f`` (linear decay logits), and
tanh-bounded candidate states ``g`` and ``k``. The update

    h_t = s * g + (1 - s) * k,   s = sigmoid(-f * dt)

mixes the candidates with an elapsed-time gate: ``dt = 0`` gives the equal
mix, large ``dt`` with ``f > 0`` relaxes to ``k``.

The backbone weight is stored split in two (``w_in`` for the input half,
``w_bh`` for the hidden half) so the input projection for a whole sequence is
one matmul and only the recurrence runs inside the fused scan kernel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from . import kernels
from .data import PatientSequence


@dataclass
class CfCParams:
    w_in: E.Tensor      # (d_in, units)
    b_in: E.Tensor      # (units,)
    w_bh: E.Tensor      # (d_h, units)
    w_heads: E.Tensor   # (units, 3 * d_h): f | g | k
    b_heads: E.Tensor   # (3 * d_h,)

    @property
    def d_in(self) -> int:
        return self.w_in.shape[0]

    @property
    def d_h(self) -> int:
        return self.w_bh.shape[0]

    def named(self) -> dict[str, E.Tensor]:
        return {"w_in": self.w_in, "b_in": self.b_in, "w_bh": self.w_bh,
                "w_heads": self.w_heads, "b_heads": self.b_heads}


def input_dim(n_features: int) -> int:
    return 3 * n_features + 1


def init_cfc(rng: np.random.Generator, d_in: int, d_h: int, units: int | None = None) -> CfCParams:
    units = units or d_h
    lim_b = 1.0 / np.sqrt(d_in + d_h)
    lim_h = 1.0 / np.sqrt(units)
    b_heads = rng.uniform(-lim_h, lim_h, 3 * d_h)
    b_heads[:d_h] = 1.0  # moderate initial decay gates
    return CfCParams(
        w_in=E.tensor(rng.uniform(-lim_b, lim_b, (d_in, units)), requires_grad=True),
        b_in=E.tensor(rng.uniform(-lim_b, lim_b, units), requires_grad=True),
        w_bh=E.tensor(rng.uniform(-lim_b, lim_b, (d_h, units)), requires_grad=True),
        w_heads=E.tensor(rng.uniform(-lim_h, lim_h, (units, 3 * d_h)), requires_grad=True),
        b_heads=E.tensor(b_heads, requires_grad=True),
    )


def _heads(z: E.Tensor, p: CfCParams):
    a = E.tanh(E.matmul(z, _backbone_weight(p)) + p.b_in)
    heads = E.matmul(a, p.w_heads) + p.b_heads
    d = p.d_h
    f = heads[..., :d]
    g = E.tanh(heads[..., d:2 * d])
    k = E.tanh(heads[..., 2 * d:])
    return f, g, k


def _backbone_weight(p: CfCParams) -> E.Tensor:
    # [w_in; w_bh] stacked along the input axis, matching z = [u; h]
    return E.concat([p.w_in, p.w_bh], axis=0)


def cfc_cell(u, h_prev, dt, p: CfCParams) -> E.Tensor:
    """One closed-form update, built from differentiable primitives."""
    dt_arr = np.asarray(dt, dtype=np.float64)
    if np.any(dt_arr < 0):
        raise ValueError(f"cfc_cell: negative elapsed time {dt}")
    u, h_prev = E._as_tensor(u), E._as_tensor(h_prev)
    z = E.concat([u, h_prev], axis=-1)
    f, g, k = _heads(z, p)
    if dt_arr.ndim:
        dt_arr = dt_arr[..., None]
    s = E.sigmoid(f * (-dt_arr))
    return s * g + (1.0 - s) * k


def sequence_inputs(seqs: list[PatientSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack ``u_t = [values; obs_mask; log1p(feature_delta); valid]`` for a batch.

    Returns ``(u (B, T, 3F+1), dt (B, T), lengths (B,))``.
    """
    tmax = seqs[0].t_max
    nb = len(seqs)
    nf = seqs[0].n_features
    u = np.zeros((nb, tmax, 3 * nf + 1))
    dt = np.zeros((nb, tmax))
    lengths = np.zeros(nb, dtype=np.int64)
    for i, s in enumerate(seqs):
        tv = s.t_valid
        u[i, :, :nf] = s.values
        u[i, :, nf:2 * nf] = s.obs_mask
        u[i, :, 2 * nf:3 * nf] = np.log1p(s.feature_delta)
        u[i, :tv, 3 * nf] = 1.0
        dt[i] = s.step_delta
        lengths[i] = tv
    return u, dt, lengths


def cfc_scan(x: E.Tensor, dt: np.ndarray, lengths: np.ndarray, p: CfCParams) -> E.Tensor:
    """Run one CfC layer over a padded batch ``x (B, T, d_in)``; rows past a length are 0."""
    if x.shape[-1] != p.d_in:
        raise E.ShapeError(f"cfc_scan: input dim {x.shape[-1]} != {p.d_in}")
    if np.any(dt < 0):
        raise ValueError("cfc_scan: negative elapsed time")
    xu = E.matmul(x, p.w_in) + p.b_in
    h, cache = kernels.cfc_scan_forward(xu.data, p.w_bh.data, p.w_heads.data, p.b_heads.data, dt, lengths)
    w_bh, w_heads = p.w_bh.data, p.w_heads.data

    def backward(g):
        return kernels.cfc_scan_backward(g, w_bh, w_heads, dt, lengths, cache)

    return E.custom_op(h, (xu, p.w_bh, p.w_heads, p.b_heads), backward, "cfc_scan")


def encode_batch(u: np.ndarray, dt: np.ndarray, lengths: np.ndarray, layers: list[CfCParams]) -> E.Tensor:
    if np.any(lengths < 1):
        raise ValueError("encode: every sequence needs t_valid >= 1")
    h = E.tensor(u)
    for p in layers:
        h = cfc_scan(h, dt, lengths, p)
    return h


def encode_sequence(seq: PatientSequence, layers: CfCParams | list[CfCParams]) -> np.ndarray:
    """CfC states ``H_cfc (t_max, d_h)`` for one normalised sequence."""
    if seq.t_valid < 1:
        raise ValueError("encode_sequence: t_valid = 0")
    layers = [layers] if isinstance(layers, CfCParams) else layers
    u, dt, lengths = sequence_inputs([seq])
    with E.no_grad():
        return encode_batch(u, dt, lengths, layers).data[0]


# ---------------------------------------------------------------- reference

def ltc_reference_cell(u, h_prev, dt: float, p: CfCParams, w: np.ndarray, solver_steps: int = 8) -> np.ndarray:
    """Integrate ``dh/dt = -(w + f(z)) * h + w * f(z)`` with fixed-step RK4 over ``[0, dt]``.

    ``f`` is the sigmoid of the cell's f head on ``z = [u; h]`` (re-evaluated at
    every stage, so the decay rate follows the state); ``w`` must be positive.
    Numpy only; used for qualitative comparison against the closed form.
    """
    if solver_steps < 1:
        raise ValueError("solver_steps must be >= 1")
    w = np.asarray(w, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("ltc_reference_cell: w must be positive")
    u = np.asarray(u, dtype=np.float64)
    wb = np.concatenate([p.w_in.data, p.w_bh.data], axis=0)
    d = p.d_h

    def rhs(h):
        a = np.tanh(np.concatenate([u, h], axis=-1) @ wb + p.b_in.data)
        fz = kernels._pykernels._sigmoid(a @ p.w_heads.data[:, :d] + p.b_heads.data[:d])
        return -(w + fz) * h + w * fz

    h = np.array(h_prev, dtype=np.float64, copy=True)
    step = float(dt) / solver_steps
    if step == 0.0:
        return h
    for _ in range(solver_steps):
        k1 = rhs(h)
        k2 = rhs(h + 0.5 * step * k1)
        k3 = rhs(h + 0.5 * step * k2)
        k4 = rhs(h + step * k3)
        h = h + (step / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(h)):
            raise FloatingPointError("ltc_reference_cell: non-finite state")
    return h
