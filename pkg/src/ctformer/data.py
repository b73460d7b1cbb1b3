"""Irregular multivariate sequences, synthetic planted-shock cohorts, KDIGO labels.

A cohort is a list of :class:`PatientSequence`. Generated sequences carry raw
physiological values; :func:`fit_normalization` on the training split plus
:func:`zscore_normalize` turns them into model input.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels

SCHEMA_VERSION = 1
LEAD_TIMES = (0, 6, 12, 18, 24)

CREATININE, URINE, RESP = 0, 1, 2
PINNED = (CREATININE, URINE, RESP)
FEATURE_NAMES = (
    "creatinine", "urine_rate", "resp_rate", "heart_rate", "map", "bun",
    "pco2", "spo2", "temperature", "lactate", "potassium", "wbc",
)

# KDIGO thresholds
CR_RISE = 0.3
CR_RISE_WINDOW_H = 48.0
CR_RATIO = 1.5
CR_RATIO_WINDOW_H = 168.0
URINE_LOW = 0.5
URINE_HOURS = 6.0
_EPS = 1e-9


class CohortFormatError(ValueError):
    pass


def feature_names(n_features: int) -> list[str]:
    names = list(FEATURE_NAMES[:n_features])
    names += [f"channel_{i}" for i in range(len(names), n_features)]
    return names


@dataclass
class PatientSequence:
    patient_id: str
    timestamps: np.ndarray          # (t_valid,) hours, strictly increasing
    values: np.ndarray              # (t_max, F), 0 where unobserved or padded
    obs_mask: np.ndarray            # (t_max, F) in {0, 1}
    feature_delta: np.ndarray       # (t_max, F)
    step_delta: np.ndarray          # (t_max,)
    t_valid: int
    label: int
    onset_index: int | None = None  # planted trigger step inside the window
    onset_hour: float | None = None  # KDIGO onset (positives) or pseudo-onset
    raw_series: dict | None = None   # full-timeline creatinine / urine for labelling

    @property
    def t_max(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def validate(self) -> None:
        """Raise ``ValueError`` naming the first violated invariant."""
        tv, tm = self.t_valid, self.t_max
        if not 1 <= tv <= tm:
            raise ValueError(f"{self.patient_id}: t_valid={tv} outside [1, {tm}]")
        if self.timestamps.shape != (tv,):
            raise ValueError(f"{self.patient_id}: {self.timestamps.shape[0]} timestamps for t_valid={tv}")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError(f"{self.patient_id}: timestamps not strictly increasing")
        for name in ("values", "obs_mask", "feature_delta"):
            arr = getattr(self, name)
            if arr.shape != self.values.shape:
                raise ValueError(f"{self.patient_id}: {name} shape {arr.shape} != {self.values.shape}")
            if np.any(arr[tv:] != 0):
                raise ValueError(f"{self.patient_id}: {name} nonzero beyond t_valid")
        if self.step_delta.shape != (tm,) or np.any(self.step_delta[tv:] != 0):
            raise ValueError(f"{self.patient_id}: step_delta nonzero beyond t_valid")
        if not np.isin(self.obs_mask, (0.0, 1.0)).all():
            raise ValueError(f"{self.patient_id}: obs_mask not binary")
        if np.any(self.values[self.obs_mask == 0] != 0):
            raise ValueError(f"{self.patient_id}: unobserved cell with nonzero value")
        fd, sd = compute_deltas(self.timestamps, self.obs_mask[:tv])
        if not (np.array_equal(fd, self.feature_delta[:tv]) and np.array_equal(sd, self.step_delta[:tv])):
            raise ValueError(f"{self.patient_id}: deltas disagree with the recurrence")
        if self.label not in (0, 1):
            raise ValueError(f"{self.patient_id}: label {self.label!r} not binary")
        if self.onset_index is not None and not 0 <= self.onset_index < tv:
            raise ValueError(f"{self.patient_id}: onset_index outside valid window")

    def replace(self, **kw) -> "PatientSequence":
        return dataclasses.replace(self, **kw)

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "timestamps": self.timestamps.tolist(),
            "values": self.values.tolist(),
            "obs_mask": self.obs_mask.astype(int).tolist(),
            "feature_delta": self.feature_delta.tolist(),
            "step_delta": self.step_delta.tolist(),
            "t_valid": self.t_valid,
            "label": self.label,
            "onset_index": self.onset_index,
            "onset_hour": self.onset_hour,
            "raw_series": self.raw_series,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PatientSequence":
        missing = {f.name for f in dataclasses.fields(cls)} - obj.keys()
        if missing:
            raise ValueError(f"missing fields {sorted(missing)}")
        return cls(
            patient_id=str(obj["patient_id"]),
            timestamps=np.asarray(obj["timestamps"], dtype=np.float64).reshape(-1),
            values=np.asarray(obj["values"], dtype=np.float64),
            obs_mask=np.asarray(obj["obs_mask"], dtype=np.float64),
            feature_delta=np.asarray(obj["feature_delta"], dtype=np.float64),
            step_delta=np.asarray(obj["step_delta"], dtype=np.float64),
            t_valid=int(obj["t_valid"]),
            label=int(obj["label"]),
            onset_index=None if obj["onset_index"] is None else int(obj["onset_index"]),
            onset_hour=None if obj["onset_hour"] is None else float(obj["onset_hour"]),
            raw_series=obj["raw_series"],
        )


def cohorts_equal(a: Sequence[PatientSequence], b: Sequence[PatientSequence]) -> bool:
    if len(a) != len(b):
        return False
    return all(json.dumps(x.to_json()) == json.dumps(y.to_json()) for x, y in zip(a, b))


# ----------------------------------------------------------------- deltas

def compute_deltas(timestamps, obs_mask) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature hours since last observation and per-step elapsed hours.

    ``feature_delta[0] = 0``; afterwards the gap is added to the previous delta
    unless the feature was observed at the previous step, in which case the
    delta restarts at the gap. Extra rows of ``obs_mask`` beyond
    ``len(timestamps)`` are treated as padding and yield zeros.
    """
    ts = np.asarray(timestamps, dtype=np.float64)
    mask = np.asarray(obs_mask, dtype=np.float64)
    if mask.ndim == 1:
        mask = mask[:, None]
    if np.any(np.diff(ts) <= 0):
        raise ValueError("compute_deltas: timestamps must be strictly increasing")
    tv = ts.shape[0]
    tmax = max(mask.shape[0], tv)
    if mask.shape[0] < tv:
        raise ValueError(f"compute_deltas: mask has {mask.shape[0]} rows for {tv} timestamps")
    ts_pad = np.zeros(tmax)
    ts_pad[:tv] = ts
    fd = kernels.feature_deltas(ts_pad[None], mask[None], np.array([tv]))[0]
    step = np.zeros(tmax)
    step[1:tv] = np.diff(ts)
    return fd, step


# ------------------------------------------------------------------ KDIGO

def kdigo_label(timestamps, creatinine, urine_rate) -> tuple[int, float | None]:
    """KDIGO-style AKI label and onset hour on aligned raw series.

    NaN marks an unobserved reading. Baseline creatinine is the first observed
    value. Criteria: a rise of >= 0.3 mg/dL over any earlier reading within 48 h;
    a reading >= 1.5x baseline within 7 days of the baseline reading; urine
    rate < 0.5 ml/kg/h on consecutive readings spanning >= 6 h. The onset is
    the earliest timestamp at which any criterion is met.
    """
    t = np.asarray(timestamps, dtype=np.float64)
    cr = np.asarray(creatinine, dtype=np.float64)
    ur = np.asarray(urine_rate, dtype=np.float64)
    obs = ~np.isnan(cr)
    if not obs.any():
        raise ValueError("kdigo_label: no creatinine reading, baseline undefined")
    tc, vc = t[obs], cr[obs]
    onset = math.inf
    base_t, base_v = tc[0], vc[0]
    # sliding 48 h window minimum over earlier readings (monotone deque of indices)
    window: list[int] = []
    head = 0
    for b in range(len(tc)):
        while head < len(window) and tc[b] - tc[window[head]] > CR_RISE_WINDOW_H + _EPS:
            head += 1
        if head < len(window) and vc[b] - vc[window[head]] >= CR_RISE - _EPS:
            onset = min(onset, tc[b])
            break
        while len(window) > head and vc[window[-1]] >= vc[b]:
            window.pop()
        window.append(b)
    for b in range(len(tc)):
        if tc[b] - base_t > CR_RATIO_WINDOW_H + _EPS or tc[b] >= onset:
            break
        if vc[b] >= CR_RATIO * base_v - _EPS:
            onset = min(onset, tc[b])
            break
    uobs = ~np.isnan(ur)
    tu, vu = t[uobs], ur[uobs]
    run_start = None
    for i in range(len(tu)):
        if tu[i] >= onset:
            break
        if vu[i] < URINE_LOW:
            if run_start is None:
                run_start = tu[i]
            if tu[i] - run_start >= URINE_HOURS - _EPS:
                onset = min(onset, tu[i])
                break
        else:
            run_start = None
    if math.isinf(onset):
        return 0, None
    return 1, float(onset)


# ---------------------------------------------------------- normalisation

@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    zero_variance: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "zero_variance": self.zero_variance}

    @classmethod
    def from_json(cls, obj: dict) -> "NormalizationStats":
        return cls(np.asarray(obj["mean"], float), np.asarray(obj["std"], float), list(obj["zero_variance"]))


def fit_normalization(train: Iterable[PatientSequence]) -> NormalizationStats:
    """Per-feature mean/std over observed cells of the training split."""
    train = list(train)
    nf = train[0].n_features
    s = np.zeros(nf)
    s2 = np.zeros(nf)
    n = np.zeros(nf)
    for p in train:
        m = p.obs_mask
        s += (p.values * m).sum(axis=0)
        n += m.sum(axis=0)
    mu = np.divide(s, n, out=np.zeros(nf), where=n > 0)
    for p in train:
        m = p.obs_mask
        s2 += (((p.values - mu) * m) ** 2).sum(axis=0)
    var = np.divide(s2, n, out=np.zeros(nf), where=n > 0)
    std = np.sqrt(var)
    flagged = [int(i) for i in np.flatnonzero(std <= 1e-12)]
    std[flagged] = 1.0
    return NormalizationStats(mu, std, flagged)


def zscore_normalize(cohort: Iterable[PatientSequence], stats: NormalizationStats) -> list[PatientSequence]:
    out = []
    for p in cohort:
        v = (p.values - stats.mean) / stats.std * p.obs_mask
        out.append(p.replace(values=np.where(p.obs_mask > 0, v, 0.0)))
    return out


# --------------------------------------------------------------- splitting

def split_cohort(cohort: Sequence[PatientSequence], fractions=(0.7, 0.15, 0.15),
                 seed: int = 0) -> tuple[list, list, list]:
    """Patient-level train/val/test split, stratified by label."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions {fractions} do not sum to 1")
    rng = np.random.default_rng(seed)
    parts: tuple[list, list, list] = ([], [], [])
    for lab in (0, 1):
        idx = [i for i, p in enumerate(cohort) if p.label == lab]
        idx = [idx[i] for i in rng.permutation(len(idx))]
        n_tr = int(round(fractions[0] * len(idx)))
        n_va = int(round(fractions[1] * len(idx)))
        for k, sl in enumerate((idx[:n_tr], idx[n_tr:n_tr + n_va], idx[n_tr + n_va:])):
            parts[k].extend(sl)
    return tuple([cohort[i] for i in sorted(part)] for part in parts)  # type: ignore[return-value]


# ---------------------------------------------------------------- generator

@dataclass
class SyntheticConfig:
    n_patients: int = 2000
    n_features: int = 12
    t_max: int = 48
    target_prevalence: float = 0.35
    missing_rate: float = 0.4
    lead_time_hours: int = 6
    shock_magnitude: float = 1.0
    shock_ramp_hours: float = 28.0
    ramp_power: float = 12.0
    decoy_rate: float = 0.3
    rng_seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.target_prevalence < 1.0:
            raise ValueError("target_prevalence must lie in (0, 1)")
        if self.lead_time_hours not in LEAD_TIMES:
            raise ValueError(f"lead_time_hours must be one of {LEAD_TIMES}")
        if self.t_max < 8:
            raise ValueError("t_max must be >= 8")
        if self.n_features < len(PINNED):
            raise ValueError(f"n_features must be >= {len(PINNED)}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.n_patients < 0:
            raise ValueError("n_patients must be >= 0")
        if self.shock_ramp_hours <= 0 or self.ramp_power <= 0 or self.shock_magnitude < 0:
            raise ValueError("shock_ramp_hours and ramp_power must be positive, shock_magnitude >= 0")
        if not 0.0 <= self.decoy_rate <= 1.0:
            raise ValueError("decoy_rate must lie in [0, 1]")


MIN_VALID_STEPS = 4
MAX_RETRIES = 20

# per-feature (population mean, between-patient sd, within-patient noise sd)
_GENERIC = np.array([
    (85.0, 10.0, 4.0),    # heart_rate
    (80.0, 8.0, 4.0),     # map
    (18.0, 5.0, 1.5),     # bun
    (40.0, 4.0, 2.0),     # pco2
    (96.0, 1.5, 1.0),     # spo2
    (37.0, 0.4, 0.2),     # temperature
    (1.5, 0.5, 0.2),      # lactate
    (4.1, 0.3, 0.15),     # potassium
    (9.0, 2.5, 0.8),      # wbc
])


def generate_synthetic_cohort(config: SyntheticConfig) -> list[PatientSequence]:
    """Deterministic synthetic cohort with planted multi-feature shocks.

    Every patient has a trigger time on its raw timeline. Positives get an
    acute, transient shock there (respiratory-rate spike, urine-rate dip,
    small creatinine bump) followed by a convex creatinine ramp that stays
    near baseline for most of its delay and crosses the KDIGO rise threshold
    near the end. A share of negatives (decoys) gets the respiratory spike and
    a weaker urine dip at the same point. Pinned channels are measured at the
    trigger step for positives and decoys alike. Labels come from
    :func:`kdigo_label` on the full raw series. The window ends strictly
    before ``onset - W`` (negatives use a pseudo-onset computed from the same
    ramp) and keeps the last ``t_max`` readings. All random draws are
    per-patient and independent of ``W``, so cohorts that differ only in lead
    time contain the same patients.
    """
    config.validate()
    root = np.random.SeedSequence(config.rng_seed)
    children = root.spawn(config.n_patients)
    cohort = []
    for i, ss in enumerate(children):
        pid = f"P{config.rng_seed:04d}-{i:05d}"
        for attempt in range(MAX_RETRIES):
            rng = np.random.default_rng(ss.spawn(1)[0] if attempt else ss)
            p = _generate_patient(pid, rng, config)
            if p is not None:
                cohort.append(p)
                break
        else:
            raise RuntimeError(f"{pid}: fewer than {MIN_VALID_STEPS} valid steps after {MAX_RETRIES} retries")
    return cohort


def _generate_patient(pid: str, rng: np.random.Generator, cfg: SyntheticConfig) -> PatientSequence | None:
    nf = cfg.n_features
    planted = rng.random() < cfg.target_prevalence
    decoy = (not planted) and rng.random() < cfg.decoy_rate
    spacing = rng.uniform(0.8, 1.4)
    trigger_h = rng.uniform(40.0, 70.0)
    strength = cfg.shock_magnitude * rng.uniform(0.3, 1.0)
    delay = cfg.shock_ramp_hours * rng.uniform(0.4, 1.6)
    n_raw = int(math.ceil((trigger_h + delay + 24.0) / spacing)) + 2
    t = np.arange(n_raw) * spacing + rng.uniform(-0.3, 0.3, n_raw) * spacing
    t -= t[0]
    j_trig = int(np.searchsorted(t, trigger_h))
    t_trig = t[j_trig]

    raw = np.zeros((n_raw, nf))
    # creatinine: stable baseline with small drift
    cr_base = rng.uniform(0.6, 1.6)
    cr_slope = rng.uniform(-0.06, 0.06) / 48.0
    raw[:, CREATININE] = (cr_base + cr_slope * t + 0.02 * np.sin(2 * np.pi * t / rng.uniform(18, 40) + rng.uniform(0, 6.3))
                          + rng.normal(0, 0.015, n_raw))
    ur_base = rng.uniform(0.8, 1.6)
    raw[:, URINE] = ur_base + 0.08 * np.sin(2 * np.pi * t / rng.uniform(10, 30) + rng.uniform(0, 6.3)) + rng.normal(0, 0.05, n_raw)
    rr_base = rng.uniform(14, 22)
    raw[:, RESP] = rr_base + 1.0 * np.sin(2 * np.pi * t / rng.uniform(8, 24) + rng.uniform(0, 6.3)) + rng.normal(0, 1.0, n_raw)
    for f in range(len(PINNED), nf):
        mu, sd_between, sd_noise = _GENERIC[(f - len(PINNED)) % len(_GENERIC)]
        base = rng.normal(mu, sd_between)
        drift = sd_noise * np.sin(2 * np.pi * t / rng.uniform(12, 48) + rng.uniform(0, 6.3))
        raw[:, f] = base + drift + rng.normal(0, sd_noise, n_raw)

    after = t >= t_trig
    since = np.where(after, t - t_trig, 0.0)
    # convex ramp: nearly flat for most of the delay, then steep near onset
    ramp = (CR_RISE + 0.02) * np.minimum(since / delay, 1.3) ** cfg.ramp_power
    bump = 0.12 * strength * np.exp(-since / 4.0)
    rise = (ramp + bump) * after
    spike = 10.0 * strength * np.exp(-since / 3.0) * after
    dip = rng.uniform(0.25, 0.45) * np.exp(-since / 5.0) * after
    if planted:
        raw[:, RESP] += spike
        raw[:, URINE] = np.where(after, np.maximum(raw[:, URINE] * (1.0 - dip), 0.58 + rng.normal(0, 0.02, n_raw)),
                                 raw[:, URINE])
        raw[:, CREATININE] += rise
    elif decoy:
        raw[:, RESP] += spike
        raw[:, URINE] *= 1.0 - dip * rng.uniform(0.0, 0.5)

    label, onset = kdigo_label(t, raw[:, CREATININE], raw[:, URINE])
    if label:
        cut = onset - cfg.lead_time_hours
        onset_hour = onset
    else:
        # pseudo-onset: where the same creatinine ramp would have met KDIGO
        hyp, pseudo = kdigo_label(t, raw[:, CREATININE] + rise, raw[:, URINE])
        if not hyp:
            pseudo = t[-1]
        cut = pseudo - cfg.lead_time_hours
        onset_hour = float(pseudo)
    keep = np.flatnonzero(t < cut)
    if keep.size < MIN_VALID_STEPS:
        return None
    keep = keep[-cfg.t_max:]
    tv = keep.size

    mask = (rng.random((n_raw, nf)) >= cfg.missing_rate).astype(np.float64)
    if planted or decoy:
        # event-triggered measurement: the acute episode prompts a full panel
        mask[j_trig, list(PINNED)] = 1.0
    win_mask = mask[keep]
    # every kept step carries at least one reading
    empty = win_mask.sum(axis=1) == 0
    win_mask[empty, RESP] = 1.0

    tmax = cfg.t_max
    values = np.zeros((tmax, nf))
    obs = np.zeros((tmax, nf))
    values[:tv] = raw[keep] * win_mask
    obs[:tv] = win_mask
    ts = t[keep] - t[keep[0]]
    fd, sd = compute_deltas(ts, obs)
    onset_index = None
    if planted and label and keep[0] <= j_trig <= keep[-1]:
        onset_index = int(j_trig - keep[0])
    raw_series = {
        "hours": (t - t[keep[0]]).tolist(),
        "creatinine": raw[:, CREATININE].tolist(),
        "urine_rate": raw[:, URINE].tolist(),
    }
    return PatientSequence(
        patient_id=pid, timestamps=ts, values=values, obs_mask=obs,
        feature_delta=fd, step_delta=sd, t_valid=tv, label=int(label),
        onset_index=onset_index, onset_hour=float(onset_hour - t[keep[0]]),
        raw_series=raw_series,
    )


# --------------------------------------------------------------------- I/O

def save_cohort(path, cohort: Sequence[PatientSequence], config: SyntheticConfig | None = None) -> None:
    """NDJSON: a header line ``{"schema_version", "config"}`` then one patient per line."""
    path = Path(path)
    with path.open("w") as fh:
        header = {"schema_version": SCHEMA_VERSION,
                  "config": dataclasses.asdict(config) if config else None}
        fh.write(json.dumps(header) + "\n")
        for p in cohort:
            fh.write(json.dumps(p.to_json()) + "\n")


def load_cohort(path) -> list[PatientSequence]:
    return read_cohort(path)[0]


def read_cohort(path) -> tuple[list[PatientSequence], SyntheticConfig | None]:
    cohort: list[PatientSequence] = []
    config = None
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CohortFormatError(f"line {lineno}: malformed JSON ({e.msg})") from None
            if lineno == 1 and "schema_version" in obj:
                if obj["schema_version"] != SCHEMA_VERSION:
                    raise CohortFormatError(f"line 1: unsupported schema_version {obj['schema_version']}")
                if obj.get("config"):
                    config = SyntheticConfig(**obj["config"])
                continue
            try:
                p = PatientSequence.from_json(obj)
                p.validate()
            except (ValueError, TypeError, KeyError) as e:
                raise CohortFormatError(f"line {lineno}: {e}") from None
            cohort.append(p)
    return cohort, config
