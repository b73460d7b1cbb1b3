"""CT-Former assembly: CfC encoder, causal transformer, causal head, gated fusion.

Parameters are partitioned into a Stage-1 group (encoders and the Stage-1
head) and a Stage-2 group (``W_c``, gate, classifier). Ablation variants:

``full``            every component
``no_cfc``          CfC replaced by an affine embedding of ``u_t``
``no_transformer``  prediction from the last CfC state; no A, so no Stage 2
``g_only``          Stage 2 classifies G directly (gate bypassed)
``l_only``          Stage 2 classifies L directly (gate bypassed)
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import causal, cfc, fusion, transformer
from . import engine as E
from .data import PatientSequence

VARIANTS = ("full", "no_cfc", "no_transformer", "g_only", "l_only")


@dataclass
class ModelConfig:
    n_features: int = 12
    t_max: int = 48
    d_h: int = 32
    backbone_units: int = 32
    cfc_layers: int = 1
    n_layers: int = 3
    n_heads: int = 4
    ff_dim: int | None = None
    variant: str = "full"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}")
        if self.d_h % self.n_heads:
            raise ValueError(f"d_h={self.d_h} not divisible by n_heads={self.n_heads}")
        if self.cfc_layers < 1 or self.n_layers < 0:
            raise ValueError("need cfc_layers >= 1 and n_layers >= 0")

    @property
    def has_stage2(self) -> bool:
        return self.variant != "no_transformer"

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    u: np.ndarray
    dt: np.ndarray
    lengths: np.ndarray
    y: np.ndarray
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def make_batch(seqs: list[PatientSequence]) -> Batch:
    u, dt, lengths = cfc.sequence_inputs(seqs)
    return Batch(u, dt, lengths, np.array([s.label for s in seqs], dtype=np.float64),
                 [s.patient_id for s in seqs])


class CTFormer:
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.d_h
        d_in = cfc.input_dim(config.n_features)
        self.stage1: dict[str, E.Tensor] = {}
        self.cfc_layers: list[cfc.CfCParams] = []
        if config.variant == "no_cfc":
            lim = 1.0 / np.sqrt(d_in)
            self.stage1["emb.w"] = E.tensor(rng.uniform(-lim, lim, (d_in, d)), requires_grad=True)
            self.stage1["emb.b"] = E.tensor(np.zeros(d), requires_grad=True)
        else:
            for i in range(config.cfc_layers):
                p = cfc.init_cfc(rng, d_in if i == 0 else d, d, config.backbone_units)
                self.cfc_layers.append(p)
                self.stage1.update({f"cfc.{i}.{k}": v for k, v in p.named().items()})
        self.trans: transformer.TransformerParams | None = None
        if config.variant != "no_transformer":
            self.trans = transformer.init_transformer(rng, d, config.n_layers, config.n_heads, config.ff_dim)
            self.stage1.update({f"trans.{k}": v for k, v in self.trans.named().items()})
        lim = 1.0 / np.sqrt(d)
        self.stage1["head1.w"] = E.tensor(rng.uniform(-lim, lim, d), requires_grad=True)
        self.stage1["head1.b"] = E.tensor(np.zeros(1), requires_grad=True)
        self.stage2: dict[str, E.Tensor] = {}
        self.fusion: fusion.FusionParams | None = None
        if config.has_stage2:
            self.stage2["causal.w_c"] = causal.init_causal_head(rng, config.t_max)
            self.fusion = fusion.init_fusion(rng, d)
            self.stage2.update({f"fusion.{k}": v for k, v in self.fusion.named().items()})

    # ---------------------------------------------------------- parameters
    def named_parameters(self) -> dict[str, E.Tensor]:
        return {**{f"stage1.{k}": v for k, v in self.stage1.items()},
                **{f"stage2.{k}": v for k, v in self.stage2.items()}}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(arrays) != set(params):
            raise ValueError(f"parameter names differ: {sorted(set(arrays) ^ set(params))}")
        for k, arr in arrays.items():
            if arr.shape != params[k].shape:
                raise E.ShapeError(f"{k}: stored shape {arr.shape} != model shape {params[k].shape}")
            params[k].data[...] = arr

    def digest(self, group: str = "stage1") -> str:
        params = self.stage1 if group == "stage1" else self.stage2
        h = hashlib.sha256()
        for k in sorted(params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(params[k].data).tobytes())
        return h.hexdigest()

    def set_trainable(self, stage1: bool, stage2: bool) -> None:
        for p in self.stage1.values():
            p.requires_grad = stage1
        for p in self.stage2.values():
            p.requires_grad = stage2

    # ------------------------------------------------------------- forward
    def encode_cfc(self, u: np.ndarray, dt: np.ndarray, lengths: np.ndarray) -> E.Tensor:
        if self.config.variant == "no_cfc":
            valid = (np.arange(u.shape[1])[None, :] < lengths[:, None])[:, :, None]
            return (E.matmul(E.tensor(u), self.stage1["emb.w"]) + self.stage1["emb.b"]) * valid
        return cfc.encode_batch(u, dt, lengths, self.cfc_layers)

    def stage1_forward(self, batch: Batch) -> dict[str, E.Tensor]:
        h_cfc = self.encode_cfc(batch.u, batch.dt, batch.lengths)
        out = {"h_cfc": h_cfc}
        if self.trans is None:
            last = h_cfc[np.arange(len(batch)), batch.lengths - 1]
            out["g"] = last
        else:
            enc = transformer.encode(h_cfc, batch.lengths, self.trans)
            out.update(h_trans=enc.h_trans, attn=enc.attn, g=enc.g)
        out["prob"] = transformer.stage1_logit(out["g"], self.stage1["head1.w"], self.stage1["head1.b"])
        return out

    def stage2_forward(self, h_cfc, g_ctx, attn, lengths) -> dict[str, E.Tensor]:
        if not self.config.has_stage2:
            raise RuntimeError("variant no_transformer has no attention matrix, hence no Stage 2")
        out = causal.decouple(attn, h_cfc, self.stage2["causal.w_c"], lengths)
        g_ctx = E._as_tensor(g_ctx)
        variant = self.config.variant
        if variant == "g_only":
            h_final = g_ctx
        elif variant == "l_only":
            h_final = out["L"]
        else:
            gate, h_final = fusion.gated_fusion(g_ctx, out["L"], self.fusion)
            out["gate"] = gate
        out["h_final"] = h_final
        out["prob"] = fusion.predict(h_final, self.fusion)
        return out

    def forward(self, batch: Batch) -> dict[str, E.Tensor]:
        """Full inference path; Stage-1 outputs are detached before Stage 2."""
        s1 = self.stage1_forward(batch)
        if not self.config.has_stage2:
            return s1
        s2 = self.stage2_forward(s1["h_cfc"].detach(), s1["g"].detach(), s1["attn"].detach(), batch.lengths)
        s2["stage1_prob"] = s1["prob"]
        return s2

    def predict_proba(self, seqs: list[PatientSequence] | Batch, batch_size: int = 256) -> np.ndarray:
        """Final-model probabilities (Stage 2 if present, else Stage 1)."""
        batch = seqs if isinstance(seqs, Batch) else None
        seqs_list = None if batch else list(seqs)
        n = len(batch) if batch else len(seqs_list)
        out = np.zeros(n)
        with E.no_grad():
            for lo in range(0, n, batch_size):
                b = _slice(batch, lo, lo + batch_size) if batch else make_batch(seqs_list[lo:lo + batch_size])
                out[lo:lo + len(b)] = self.forward(b)["prob"].data
        return out


def _slice(batch: Batch, lo: int, hi: int) -> Batch:
    return Batch(batch.u[lo:hi], batch.dt[lo:hi], batch.lengths[lo:hi], batch.y[lo:hi], batch.ids[lo:hi])
