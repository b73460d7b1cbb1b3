"""Two-stage training protocol, representation extraction, checkpoints.

Stage 1 trains the encoders and a head on ``G`` with cross entropy. The
frozen Stage-1 model is then run once over every patient to cache
``(H_cfc, G, A, t_valid, y)``. Stage 2 trains only ``W_c``, the gate and the
classifier on those cached tuples, so no gradient can reach Stage 1.

Checkpoints and tuple caches share one container: an uncompressed zip with a
``manifest.json`` and one flat little-endian float64 blob per named array.
Entries are written in sorted order with a fixed timestamp, so saving the
same content twice gives identical bytes.
"""
from __future__ import annotations

import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import engine as E
from . import fusion, metrics
from .data import PatientSequence
from .model import VARIANTS, Batch, CTFormer, ModelConfig, _slice, make_batch

log = logging.getLogger(__name__)

CONTAINER_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class TrainingDivergence(FloatingPointError):
    pass


class CacheMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-3
    max_epochs_stage1: int = 40
    max_epochs_stage2: int = 60
    patience: int = 10
    lam: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = 5.0
    pos_weight: float = 1.0
    warm_start: bool = True
    gate_bias_init: float = 3.0
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def validate(self) -> None:
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError(f"split fractions {self.split} must be non-negative and sum to 1")
        for name in ("batch_size", "lr_stage1", "lr_stage2", "pos_weight"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0 or self.patience < 0:
            raise ValueError("lam and patience must be >= 0")


class Adam:
    def __init__(self, params: Sequence[E.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip: float | None = None):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps, self.clip = lr, betas[0], betas[1], eps, clip
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.clip is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.clip:
                grads = [g * (self.clip / norm) for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EpochLog:
    stage: int
    epoch: int
    train_loss: float
    val_loss: float
    val_auroc: float
    val_auprc: float

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    best_epoch: int
    best_val_auprc: float
    epochs_run: int
    log: list[EpochLog] = field(default_factory=list)


def _take(batch: Batch, idx: np.ndarray) -> Batch:
    return Batch(batch.u[idx], batch.dt[idx], batch.lengths[idx], batch.y[idx], [batch.ids[i] for i in idx])


def _safe_metrics(y: np.ndarray, p: np.ndarray) -> tuple[float, float]:
    if y.sum() == 0 or y.sum() == y.size:
        return float("nan"), float("nan")
    return metrics.auroc(p, y), metrics.auprc(p, y)


def _divergence(stage: int, epoch: int, bi: int, params: dict[str, E.Tensor]) -> TrainingDivergence:
    norms = {k: float(np.linalg.norm(v.data)) for k, v in params.items()}
    worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:3]
    return TrainingDivergence(f"stage {stage}: non-finite loss at epoch {epoch}, batch {bi}; "
                              f"largest parameter norms {worst}")


def _fit(stage: int, params: dict[str, E.Tensor], n_train: int, loss_fn, val_fn, cfg: TrainConfig,
         lr: float, max_epochs: int, log_fh=None) -> TrainResult:
    """Shared mini-batch loop with early stopping on validation AUPRC."""
    opt = Adam(list(params.values()), lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.grad_clip)
    rng = np.random.default_rng([cfg.seed, stage])
    best = (-math.inf, -1, {k: v.data.copy() for k, v in params.items()})
    result = TrainResult(-1, -math.inf, 0)
    wait = 0
    for epoch in range(max_epochs):
        perm = rng.permutation(n_train)
        total = 0.0
        for bi, lo in enumerate(range(0, n_train, cfg.batch_size)):
            idx = perm[lo:lo + cfg.batch_size]
            E.zero_grad(params.values())
            loss = loss_fn(idx)
            if not np.isfinite(loss.data).all():
                raise _divergence(stage, epoch, bi, params)
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        val_loss, val_auroc, val_auprc = val_fn()
        entry = EpochLog(stage, epoch, total / n_train, val_loss, val_auroc, val_auprc)
        result.log.append(entry)
        result.epochs_run = epoch + 1
        if log_fh is not None:
            log_fh.write(json.dumps(entry.to_json()) + "\n")
            log_fh.flush()
        log.debug("stage %d epoch %d loss %.4f val auprc %.4f", stage, epoch, entry.train_loss, val_auprc)
        score = val_auprc if math.isfinite(val_auprc) else -val_loss
        if score > best[0]:
            best = (score, epoch, {k: v.data.copy() for k, v in params.items()})
            wait = 0
        else:
            wait += 1
            if wait > cfg.patience:
                break
    for k, v in params.items():
        v.data[...] = best[2][k]
    result.best_epoch, result.best_val_auprc = best[1], best[0]
    return result


# ------------------------------------------------------------------ stage 1

def train_stage1(model: CTFormer, train: Sequence[PatientSequence], val: Sequence[PatientSequence],
                 cfg: TrainConfig, log_fh=None) -> TrainResult:
    """Algorithm 1, step 1: fit encoders and the Stage-1 head on ``sigmoid(head(G))``."""
    cfg.validate()
    model.set_trainable(True, False)
    tb, vb = make_batch(list(train)), make_batch(list(val))

    def loss_fn(idx):
        b = _take(tb, idx)
        return E.binary_cross_entropy(model.stage1_forward(b)["prob"], b.y, cfg.pos_weight)

    def val_fn():
        p = stage1_predict(model, vb)
        with E.no_grad():
            vl = float(E.binary_cross_entropy(E.tensor(p), vb.y, cfg.pos_weight).data)
        return (vl, *_safe_metrics(vb.y, p))

    res = _fit(1, model.stage1, len(tb), loss_fn, val_fn, cfg, cfg.lr_stage1, cfg.max_epochs_stage1, log_fh)
    model.set_trainable(False, False)
    return res


def stage1_predict(model: CTFormer, batch: Batch, batch_size: int = 256) -> np.ndarray:
    out = np.zeros(len(batch))
    with E.no_grad():
        for lo in range(0, len(batch), batch_size):
            out[lo:lo + batch_size] = model.stage1_forward(_slice(batch, lo, lo + batch_size))["prob"].data
    return out


# --------------------------------------------------------------- extraction

@dataclass
class StageTwoCache:
    """Per-patient ``(H_cfc, G, A, t_valid, y)`` from one frozen Stage-1 model."""
    ids: list[str]
    h_cfc: np.ndarray    # (N, T, d)
    g: np.ndarray        # (N, d)
    attn: np.ndarray     # (N, T, T)
    lengths: np.ndarray  # (N,)
    y: np.ndarray        # (N,)
    stage1_digest: str
    model_config: dict

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, ids: Sequence[str]) -> "StageTwoCache":
        pos = {pid: i for i, pid in enumerate(self.ids)}
        idx = np.array([pos[p] for p in ids], dtype=np.int64)
        return self.take(idx)

    def take(self, idx: np.ndarray) -> "StageTwoCache":
        return StageTwoCache([self.ids[i] for i in idx], self.h_cfc[idx], self.g[idx], self.attn[idx],
                             self.lengths[idx], self.y[idx], self.stage1_digest, self.model_config)


def extract_representations(model: CTFormer, cohort: Sequence[PatientSequence],
                            batch_size: int = 256) -> StageTwoCache:
    """Algorithm 1, step 2: run the frozen Stage-1 model over every patient."""
    if not model.config.has_stage2:
        raise RuntimeError("variant no_transformer produces no attention matrix to cache")
    cohort = list(cohort)
    if cohort and cohort[0].t_max != model.config.t_max:
        raise E.ShapeError(f"cohort t_max {cohort[0].t_max} != model t_max {model.config.t_max}")
    digest = model.digest("stage1")
    parts = []
    with E.no_grad():
        for lo in range(0, len(cohort), batch_size):
            b = make_batch(cohort[lo:lo + batch_size])
            out = model.stage1_forward(b)
            if out["h_cfc"].shape[-1] != model.config.d_h:
                raise E.ShapeError("H_cfc width differs from d_model")
            parts.append((out["h_cfc"].data, out["g"].data, out["attn"].data, b.lengths, b.y))
    if model.digest("stage1") != digest:
        raise RuntimeError("Stage-1 parameters changed during extraction")
    cat = [np.concatenate([p[i] for p in parts]) for i in range(5)] if parts else [np.zeros(0)] * 5
    return StageTwoCache([p.patient_id for p in cohort], cat[0], cat[1], cat[2],
                         cat[3].astype(np.int64), cat[4], digest, model.config.to_json())


# ------------------------------------------------------------------ stage 2

def _check_cache(model: CTFormer, cache: StageTwoCache) -> None:
    if cache.model_config != model.config.to_json() and \
            {k: v for k, v in cache.model_config.items() if k != "variant"} != \
            {k: v for k, v in model.config.to_json().items() if k != "variant"}:
        raise CacheMismatch("tuple cache was produced by a different model configuration")
    if cache.stage1_digest != model.digest("stage1"):
        raise CacheMismatch("tuple cache was produced by a different Stage-1 checkpoint")


def stage2_outputs(model: CTFormer, cache: StageTwoCache, idx=None, force_gate: float | None = None):
    c = cache if idx is None else cache.take(idx)
    out = model.stage2_forward(E.tensor(c.h_cfc), E.tensor(c.g), E.tensor(c.attn), c.lengths)
    if force_gate is not None:
        # analytic gate override: h_final = gate * G + (1 - gate) * L
        gate = np.full(c.g.shape, float(force_gate))
        out["h_final"] = gate * E.tensor(c.g) + (1.0 - gate) * out["L"]
        out["prob"] = fusion.predict(out["h_final"], model.fusion)
    return out


def stage2_predict(model: CTFormer, cache: StageTwoCache, batch_size: int = 512,
                   force_gate: float | None = None) -> np.ndarray:
    out = np.zeros(len(cache))
    with E.no_grad():
        for lo in range(0, len(cache), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(cache)))
            out[idx] = stage2_outputs(model, cache, idx, force_gate)["prob"].data
    return out


def stage2_loss_on(model: CTFormer, cache: StageTwoCache, idx, cfg: TrainConfig,
                   force_gate: float | None = None) -> E.Tensor:
    out = stage2_outputs(model, cache, idx, force_gate)
    c_len = cache.lengths[idx] if idx is not None else cache.lengths
    c_y = cache.y[idx] if idx is not None else cache.y
    return fusion.stage2_loss(out["prob"], c_y, out["B"], cfg.lam, c_len, cfg.pos_weight)


def train_stage2(model: CTFormer, train: StageTwoCache, val: StageTwoCache, cfg: TrainConfig,
                 log_fh=None, force_gate: float | None = None) -> TrainResult:
    """Algorithm 2: fit W_c, gate and classifier on cached tuples; Stage 1 stays frozen."""
    cfg.validate()
    _check_cache(model, train)
    _check_cache(model, val)
    before = model.digest("stage1")
    model.set_trainable(False, True)
    if cfg.gate_bias_init and model.fusion is not None:
        model.fusion.b_g.data[...] = cfg.gate_bias_init
    if cfg.warm_start:
        model.fusion.w_cls.data[...] = model.stage1["head1.w"].data[None, :]
        model.fusion.b_cls.data[...] = model.stage1["head1.b"].data

    def loss_fn(idx):
        return stage2_loss_on(model, train, idx, cfg, force_gate)

    def val_fn():
        p = stage2_predict(model, val, force_gate=force_gate)
        with E.no_grad():
            vl = float(stage2_loss_on(model, val, np.arange(len(val)), cfg, force_gate).data)
        return (vl, *_safe_metrics(val.y, p))

    res = _fit(2, model.stage2, len(train), loss_fn, val_fn, cfg, cfg.lr_stage2, cfg.max_epochs_stage2, log_fh)
    model.set_trainable(False, False)
    if model.digest("stage1") != before:
        raise RuntimeError("Stage-1 parameters changed during Stage 2")
    return res


# ------------------------------------------------------------- container io

def _write_container(path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest = dict(manifest)
    manifest["container_version"] = CONTAINER_VERSION
    manifest["arrays"] = {k: list(arrays[k].shape) for k in sorted(arrays)}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_DATE)
        zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=1))
        for k in sorted(arrays):
            info = zipfile.ZipInfo(f"arrays/{k}.f64", date_time=_ZIP_DATE)
            zf.writestr(info, np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def _read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("container_version") != CONTAINER_VERSION:
            raise CacheMismatch(f"{path}: unsupported container version {manifest.get('container_version')}")
        arrays = {k: np.frombuffer(zf.read(f"arrays/{k}.f64"), dtype="<f8").astype(np.float64).reshape(shape)
                  for k, shape in manifest["arrays"].items()}
    return manifest, arrays


def save_checkpoint(path, model: CTFormer, stage: str, metadata: dict | None = None,
                    rng_state: dict | None = None) -> None:
    arrays = {k: v.data for k, v in model.named_parameters().items()}
    manifest = {"kind": "checkpoint", "schema_version": 1, "stage": stage,
                "model_config": model.config.to_json(), "rng_state": rng_state,
                "metadata": metadata or {}, "stage1_digest": model.digest("stage1")}
    _write_container(path, manifest, arrays)


def load_checkpoint(path) -> tuple[CTFormer, dict]:
    manifest, arrays = _read_container(path)
    if manifest.get("kind") != "checkpoint":
        raise CacheMismatch(f"{path} is not a checkpoint")
    model = CTFormer(ModelConfig(**manifest["model_config"]))
    model.load_arrays(arrays)
    model.set_trainable(False, False)
    return model, manifest


def save_tuple_cache(path, cache: StageTwoCache) -> None:
    arrays = {}
    for i, pid in enumerate(cache.ids):
        arrays[f"{pid}/h_cfc"] = cache.h_cfc[i]
        arrays[f"{pid}/g"] = cache.g[i]
        arrays[f"{pid}/attn"] = cache.attn[i]
    manifest = {"kind": "tuple_cache", "schema_version": 1, "model_config": cache.model_config,
                "stage1_digest": cache.stage1_digest,
                "patients": [{"id": pid, "t_valid": int(cache.lengths[i]), "y": float(cache.y[i])}
                             for i, pid in enumerate(cache.ids)]}
    _write_container(path, manifest, arrays)


def load_tuple_cache(path) -> StageTwoCache:
    manifest, arrays = _read_container(path)
    if manifest.get("kind") != "tuple_cache":
        raise CacheMismatch(f"{path} is not a tuple cache")
    pts = manifest["patients"]
    ids = [p["id"] for p in pts]
    stack = (lambda key: np.stack([arrays[f"{pid}/{key}"] for pid in ids])) if ids else (lambda key: np.zeros(0))
    return StageTwoCache(ids, stack("h_cfc"), stack("g"), stack("attn"),
                         np.array([p["t_valid"] for p in pts], dtype=np.int64),
                         np.array([p["y"] for p in pts], dtype=np.float64),
                         manifest["stage1_digest"], manifest["model_config"])


# ---------------------------------------------------------------- pipelines

@dataclass
class Splits:
    train: list[PatientSequence]
    val: list[PatientSequence]
    test: list[PatientSequence]


def evaluate_probs(y, p) -> dict[str, float]:
    auroc, auprc = _safe_metrics(np.asarray(y, dtype=np.float64), np.asarray(p))
    return {"auroc": auroc, "auprc": auprc, "n": int(len(y)), "positives": int(np.sum(y))}


def fit_two_stage(splits: Splits, model_cfg: ModelConfig, cfg: TrainConfig,
                  stage2_variants: Sequence[str] = ("full",), log_fh=None) -> dict:
    """Train Stage 1 once, then one Stage-2 head per requested variant.

    Returns ``{"stage1": model, "stage1_result", "stage1_test", "cache", "variants": {name: (model, result, test)}}``.
    Stage-2 variants share the same frozen Stage-1 parameters.
    """
    base_cfg = ModelConfig(**{**model_cfg.to_json(), "variant": model_cfg.variant})
    base = CTFormer(base_cfg, seed=cfg.seed)
    res1 = train_stage1(base, splits.train, splits.val, cfg, log_fh)
    test_b = make_batch(splits.test)
    out = {"stage1": base, "stage1_result": res1,
           "stage1_test": evaluate_probs(test_b.y, stage1_predict(base, test_b)), "variants": {}}
    if not base_cfg.has_stage2:
        return out
    cache = extract_representations(base, splits.train + splits.val + splits.test)
    out["cache"] = cache
    tr = cache.subset([p.patient_id for p in splits.train])
    va = cache.subset([p.patient_id for p in splits.val])
    te = cache.subset([p.patient_id for p in splits.test])
    for variant in stage2_variants:
        m = CTFormer(ModelConfig(**{**base_cfg.to_json(), "variant": variant}), seed=cfg.seed)
        m.load_arrays({**{k: v.data for k, v in m.named_parameters().items()},
                       **{f"stage1.{k}": v.data for k, v in base.stage1.items()}})
        res2 = train_stage2(m, tr, va, cfg, log_fh)
        out["variants"][variant] = (m, res2, evaluate_probs(te.y, stage2_predict(m, te)))
    return out


def run_ablation(variant: str, splits: Splits, model_cfg: ModelConfig, cfg: TrainConfig,
                 log_fh=None) -> dict:
    """Train one ablation variant end to end and report test metrics in a fixed schema."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; valid: {', '.join(VARIANTS)}")
    stage1_variant = variant if variant in ("no_cfc", "no_transformer") else "full"
    mc = ModelConfig(**{**model_cfg.to_json(), "variant": stage1_variant})
    # no_cfc keeps its own name in Stage 2 so the embedding parameters line up; it fuses like full
    out = fit_two_stage(splits, mc, cfg, stage2_variants=() if variant == "no_transformer" else (variant,),
                        log_fh=log_fh)
    report = {"variant": variant, "stage1": out["stage1_test"], "causal": None}
    if variant == "no_transformer":
        report.update(out["stage1_test"])
        report["causal_fields"] = "absent"
    else:
        m, res2, test = next(iter(out["variants"].values()))
        report.update(test)
        report["causal_fields"] = "present"
        report["causal"] = {"stage2_best_epoch": res2.best_epoch}
    return report
