"""Shapley attributions over time steps, features and cells of one sequence.

A player that is "off" has all of its cells rendered unobserved (mask 0,
value 0, deltas recomputed), which is how the model sees genuinely missing
data. The background is therefore the all-unobserved sequence with the
original timestamps.

Event level: players are the retained steps plus one player for the pruned
prefix. Feature level: players are the features (each toggled over the
retained steps) plus the prefix. Cell level: the top events x top features
cells, one "other" player for the remaining retained cells, and the prefix.
At every level the values sum to ``f(full) - f(background)``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from math import factorial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .data import PatientSequence, compute_deltas, feature_names
from .model import Batch, CTFormer

EXACT_MAX_PLAYERS = 15


# ------------------------------------------------------------- perturbation

def perturb_sequence(seq: PatientSequence, off_events: Sequence[int] = (),
                     off_features: Sequence[int] = ()) -> PatientSequence:
    """Turn off every (step, feature) cell with step in ``off_events`` or feature in ``off_features``.

    An empty ``off_features`` with events given turns off whole steps, and
    vice versa; both empty leaves the sequence unchanged.
    """
    tv, nf = seq.t_valid, seq.n_features
    ev = sorted(set(int(t) for t in off_events))
    fe = sorted(set(int(f) for f in off_features))
    if any(not 0 <= t < tv for t in ev) or any(not 0 <= f < nf for f in fe):
        raise IndexError(f"{seq.patient_id}: perturbation outside {tv} steps x {nf} features")
    off = np.zeros(seq.values.shape, dtype=bool)
    off[ev, :] = True
    off[:, fe] = True
    off[tv:] = False
    return apply_cell_mask(seq, off)


def apply_cell_mask(seq: PatientSequence, off: np.ndarray) -> PatientSequence:
    mask = seq.obs_mask * (~off)
    fd, _ = compute_deltas(seq.timestamps, mask)
    return seq.replace(values=seq.values * mask, obs_mask=mask, feature_delta=fd)


def perturbed_inputs(seq: PatientSequence, off: np.ndarray) -> Batch:
    """Model inputs for a stack of cell masks ``off (K, T, F)`` in one shot."""
    k = off.shape[0]
    tv, nf = seq.t_valid, seq.n_features
    mask = seq.obs_mask[None] * (~off)
    ts = np.zeros((k, seq.t_max))
    ts[:, :tv] = seq.timestamps
    lengths = np.full(k, tv, dtype=np.int64)
    fd = kernels.feature_deltas(ts, mask, lengths)
    u = np.zeros((k, seq.t_max, 3 * nf + 1))
    u[:, :, :nf] = seq.values[None] * mask
    u[:, :, nf:2 * nf] = mask
    u[:, :, 2 * nf:3 * nf] = np.log1p(fd)
    u[:, :tv, 3 * nf] = 1.0
    dt = np.broadcast_to(seq.step_delta, (k, seq.t_max)).copy()
    return Batch(u, dt, lengths, np.full(k, float(seq.label)), [seq.patient_id] * k)


# ----------------------------------------------------------------- games

class CoalitionGame:
    """Cooperative game on ``n`` players with a memoised batched value function.

    ``batch_fn`` maps a boolean matrix ``(K, n)`` of coalitions (True = player
    present) to ``K`` values.
    """

    def __init__(self, n: int, batch_fn: Callable[[np.ndarray], np.ndarray], batch_size: int = 512):
        if n < 1:
            raise ValueError("a game needs at least one player")
        self.n = n
        self._fn = batch_fn
        self._memo: dict[bytes, float] = {}
        self.batch_size = batch_size
        self.evaluations = 0

    @classmethod
    def from_function(cls, n: int, fn: Callable[[frozenset], float]) -> "CoalitionGame":
        def batch_fn(rows):
            return np.array([fn(frozenset(np.flatnonzero(r).tolist())) for r in rows])
        return cls(n, batch_fn)

    def values(self, coalitions: np.ndarray) -> np.ndarray:
        rows = np.asarray(coalitions, dtype=bool).reshape(-1, self.n)
        keys = [r.tobytes() for r in rows]
        todo = {}
        for k, r in zip(keys, rows):
            if k not in self._memo and k not in todo:
                todo[k] = r
        if todo:
            pending = list(todo.items())
            for lo in range(0, len(pending), self.batch_size):
                chunk = pending[lo:lo + self.batch_size]
                vals = np.asarray(self._fn(np.stack([r for _, r in chunk])), dtype=np.float64)
                self.evaluations += len(chunk)
                for (k, _), v in zip(chunk, vals):
                    self._memo[k] = float(v)
        return np.array([self._memo[k] for k in keys])

    def value(self, players) -> float:
        row = np.zeros(self.n, dtype=bool)
        row[list(players)] = True
        return float(self.values(row[None])[0])

    @property
    def full_value(self) -> float:
        return self.value(range(self.n))

    @property
    def background_value(self) -> float:
        return self.value(())


@dataclass
class ShapleyResult:
    values: np.ndarray
    se: np.ndarray | None = None
    n_permutations: int | None = None

    @property
    def exact(self) -> bool:
        return self.se is None


def exact_shapley(game: CoalitionGame) -> ShapleyResult:
    """Enumerate all ``2^n`` coalitions and weight marginals by ``|S|! (n-|S|-1)! / n!``."""
    n = game.n
    if n > EXACT_MAX_PLAYERS:
        raise ValueError(f"exact_shapley supports n <= {EXACT_MAX_PLAYERS} players, got {n}; "
                         "use sampled_shapley instead")
    codes = np.arange(1 << n)
    rows = ((codes[:, None] >> np.arange(n)) & 1).astype(bool)
    v = game.values(rows)
    size = rows.sum(axis=1)
    weight = np.array([factorial(s) * factorial(n - s - 1) / factorial(n) for s in range(n)])
    phi = np.zeros(n)
    for i in range(n):
        without = codes[~rows[:, i]]
        phi[i] = np.sum(weight[size[without]] * (v[without | (1 << i)] - v[without]))
    return ShapleyResult(phi)


def sampled_shapley(game: CoalitionGame, n_permutations: int, seed: int = 0) -> ShapleyResult:
    """Permutation-sampling estimator with per-player standard errors.

    Each permutation's marginals telescope to ``v(N) - v(empty)``, so the
    estimates sum to that difference exactly (up to rounding).
    """
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    n = game.n
    rng = np.random.default_rng(seed)
    perms = np.stack([rng.permutation(n) for _ in range(n_permutations)])
    # prefix coalitions of every permutation: (P, n + 1, n)
    rows = np.zeros((n_permutations, n + 1, n), dtype=bool)
    for j in range(n):
        rows[:, j + 1] = rows[:, j]
        rows[np.arange(n_permutations), j + 1, perms[:, j]] = True
    v = game.values(rows.reshape(-1, n)).reshape(n_permutations, n + 1)
    marg = np.zeros((n_permutations, n))
    marg[np.arange(n_permutations)[:, None], perms] = np.diff(v, axis=1)
    phi = marg.mean(axis=0)
    se = marg.std(axis=0, ddof=1) / math.sqrt(n_permutations) if n_permutations > 1 else np.full(n, np.nan)
    return ShapleyResult(phi, se, n_permutations)


def shapley(game: CoalitionGame, exact_max_players: int, n_permutations: int, seed: int) -> ShapleyResult:
    if game.n <= exact_max_players:
        return exact_shapley(game)
    return sampled_shapley(game, n_permutations, seed)


# ---------------------------------------------------------- model coupling

def model_value_fn(model: CTFormer) -> Callable[[Batch], np.ndarray]:
    from . import engine as E

    def f(batch: Batch) -> np.ndarray:
        with E.no_grad():
            return model.forward(batch)["prob"].data.copy()
    return f


class CellGame(CoalitionGame):
    """Game whose players own disjoint groups of cells of one sequence."""

    def __init__(self, seq: PatientSequence, predict: Callable[[Batch], np.ndarray],
                 player_cells: np.ndarray, batch_size: int = 256):
        player_cells = np.asarray(player_cells, dtype=bool)
        if player_cells.ndim != 3 or player_cells.shape[1:] != seq.values.shape:
            raise ValueError("player_cells must be (n_players, T, F)")
        if np.any(player_cells.sum(axis=0) > 1):
            raise ValueError("players must own disjoint cells")
        self.seq = seq
        flat = player_cells.reshape(player_cells.shape[0], -1).astype(np.float64)

        def batch_fn(rows):
            off = ((~rows).astype(np.float64) @ flat) > 0
            return predict(perturbed_inputs(seq, off.reshape((-1,) + seq.values.shape)))
        super().__init__(player_cells.shape[0], batch_fn, batch_size)


def _step_cells(seq: PatientSequence, steps) -> np.ndarray:
    m = np.zeros(seq.values.shape, dtype=bool)
    m[list(steps), :] = True
    return m


def _prefix_curve(seq: PatientSequence, predict) -> np.ndarray:
    """Prefix-player Shapley value of the 2-player game for every cut 0..t_valid-1."""
    tv = seq.t_valid
    cuts = np.arange(tv)
    pre = np.zeros((tv,) + seq.values.shape, dtype=bool)
    for c in cuts:
        pre[c, :c] = True
    tail = np.zeros_like(pre)
    tail[:, :tv] = ~pre[:, :tv]
    # off masks: background, prefix only present, suffix only present, full
    everything = np.zeros(seq.values.shape, dtype=bool)
    everything[:tv] = True
    v = predict(perturbed_inputs(seq, np.concatenate([everything[None], tail, pre, np.zeros_like(everything)[None]])))
    v_bg, v_pre, v_suf, v_full = v[0], v[1:tv + 1], v[tv + 1:2 * tv + 1], v[-1]
    curve = 0.5 * ((v_pre - v_bg) + (v_full - v_suf))
    curve[0] = 0.0  # empty prefix is a null player; drop batched round-off
    return curve


def temporal_prune(seq: PatientSequence, predict, tolerance: float) -> int:
    """Largest cut whose grouped-prefix attribution has magnitude <= tolerance."""
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    curve = _prefix_curve(seq, predict)
    ok = np.flatnonzero(np.abs(curve) <= tolerance)
    return int(ok.max()) if ok.size else 0


# ---------------------------------------------------------------- reports

@dataclass
class AttributionConfig:
    tolerance: float = 0.025
    n_permutations: int = 200
    seed: int = 0
    top_events: int = 3
    top_features: int = 5
    exact_max_players: int = 10
    batch_size: int = 256


@dataclass
class AttributionReport:
    patient_id: str
    pruning_index: int
    pruned_value: float
    event_steps: list[int]
    event_values: list[float]
    feature_names: list[str]
    feature_values: list[float]
    feature_pruned_value: float
    cell_steps: list[int]
    cell_features: list[int]
    cell_values: list[list[float]]
    cell_other_value: float
    cell_pruned_value: float
    full_value: float
    background_value: float
    pruning_curve: list[float]
    metadata: dict = field(default_factory=dict)

    def efficiency_gaps(self) -> dict[str, float]:
        target = self.full_value - self.background_value
        return {
            "event": self.pruned_value + sum(self.event_values) - target,
            "feature": self.feature_pruned_value + sum(self.feature_values) - target,
            "cell": self.cell_pruned_value + self.cell_other_value + float(np.sum(self.cell_values)) - target,
        }

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, out_dir) -> None:
        """``<id>.json`` plus event, feature, cell and pruning-curve CSVs."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pid = self.patient_id
        (out / f"{pid}.json").write_text(json.dumps(self.to_json(), indent=1))
        se = self.metadata.get("event_se") or [None] * len(self.event_values)
        _rows(out / f"{pid}_events.csv", ["step", "value", "se"],
              [["prefix", self.pruned_value, None]] + [[s, v, e] for s, v, e in zip(self.event_steps, self.event_values, se)])
        _rows(out / f"{pid}_features.csv", ["feature", "value"],
              [["prefix", self.feature_pruned_value]] + [[n, v] for n, v in zip(self.feature_names, self.feature_values)])
        cells = [[s, self.feature_names[f], self.cell_values[i][j]]
                 for i, s in enumerate(self.cell_steps) for j, f in enumerate(self.cell_features)]
        _rows(out / f"{pid}_cells.csv", ["step", "feature", "value"],
              cells + [["other", "other", self.cell_other_value], ["prefix", "prefix", self.cell_pruned_value]])
        _rows(out / f"{pid}_pruning.csv", ["cut", "prefix_value"], list(enumerate(self.pruning_curve)))


def _rows(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows([["" if x is None else (repr(x) if isinstance(x, float) else x) for x in r] for r in rows])


def _top(values, k: int) -> list[int]:
    """Indices of the k largest |values|; ties go to the lower index."""
    return [int(i) for i in np.argsort(-np.abs(np.asarray(values)), kind="stable")[:k]]


def event_level(seq, predict, pruning_index: int, cfg: AttributionConfig) -> tuple[CellGame, ShapleyResult, list[int]]:
    steps = list(range(pruning_index, seq.t_valid))
    cells = [_step_cells(seq, [t]) for t in steps]
    cells.insert(0, _step_cells(seq, range(pruning_index)))  # prefix player (may own no cells)
    game = CellGame(seq, predict, np.stack(cells), cfg.batch_size)
    return game, shapley(game, cfg.exact_max_players, cfg.n_permutations, cfg.seed), steps


def feature_level(seq, predict, pruning_index: int, cfg: AttributionConfig) -> tuple[CellGame, ShapleyResult]:
    tv, nf = seq.t_valid, seq.n_features
    cells = np.zeros((nf + 1,) + seq.values.shape, dtype=bool)
    cells[0, :pruning_index] = True
    for f in range(nf):
        cells[f + 1, pruning_index:tv, f] = True
    game = CellGame(seq, predict, cells, cfg.batch_size)
    return game, shapley(game, cfg.exact_max_players, cfg.n_permutations, cfg.seed)


def cell_level(seq, predict, pruning_index: int, events: list[int], features: list[int],
               cfg: AttributionConfig) -> tuple[CellGame, ShapleyResult]:
    tv = seq.t_valid
    players = [np.zeros(seq.values.shape, dtype=bool) for _ in range(len(events) * len(features) + 2)]
    players[0][:pruning_index] = True
    other = players[1]
    other[pruning_index:tv] = True
    for i, t in enumerate(events):
        for j, f in enumerate(features):
            players[2 + i * len(features) + j][t, f] = True
            other[t, f] = False
    game = CellGame(seq, predict, np.stack(players), cfg.batch_size)
    return game, shapley(game, cfg.exact_max_players, cfg.n_permutations, cfg.seed)


def explain(seq: PatientSequence, model: CTFormer, cfg: AttributionConfig | None = None,
            predict=None) -> AttributionReport:
    """Pruning, then event-, feature- and cell-level attributions for one patient."""
    cfg = cfg or AttributionConfig()
    predict = predict or model_value_fn(model)
    curve = _prefix_curve(seq, predict)
    ok = np.flatnonzero(np.abs(curve) <= cfg.tolerance)
    cut = int(ok.max()) if ok.size else 0
    ev_game, ev, steps = event_level(seq, predict, cut, cfg)
    ft_game, ft = feature_level(seq, predict, cut, cfg)
    top_e = [steps[i] for i in _top(ev.values[1:], cfg.top_events)]
    top_f = _top(ft.values[1:], cfg.top_features)
    _, cl = cell_level(seq, predict, cut, top_e, top_f, cfg)
    k = len(top_f)
    grid = cl.values[2:].reshape(len(top_e), k) if top_e and k else np.zeros((len(top_e), k))
    meta = {"seed": cfg.seed, "tolerance": cfg.tolerance, "n_permutations": cfg.n_permutations,
            "event_mode": "exact" if ev.exact else "sampled", "feature_mode": "exact" if ft.exact else "sampled",
            "cell_mode": "exact" if cl.exact else "sampled",
            "event_se": None if ev.exact else ev.se[1:].tolist(),
            "model_digest": model.digest("stage1") + ":" + model.digest("stage2") if model is not None else None}
    return AttributionReport(
        patient_id=seq.patient_id, pruning_index=cut, pruned_value=float(ev.values[0]),
        event_steps=steps, event_values=ev.values[1:].tolist(),
        feature_names=feature_names(seq.n_features), feature_values=ft.values[1:].tolist(),
        feature_pruned_value=float(ft.values[0]),
        cell_steps=top_e, cell_features=top_f, cell_values=grid.tolist(),
        cell_other_value=float(cl.values[1]), cell_pruned_value=float(cl.values[0]),
        full_value=ev_game.full_value, background_value=ev_game.background_value,
        pruning_curve=curve.tolist(), metadata=meta)


# -------------------------------------------------------------- alignment

def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def causal_attention_of(model: CTFormer, seq: PatientSequence) -> np.ndarray:
    from . import engine as E
    from .model import make_batch
    if not model.config.has_stage2:
        raise RuntimeError("alignment needs a Stage-2 model with causal attention")
    with E.no_grad():
        return model.forward(make_batch([seq]))["alpha"].data[0, :seq.t_valid].copy()


def alignment_check(model: CTFormer, seq: PatientSequence, k: int = 3,
                    cfg: AttributionConfig | None = None, predict=None) -> dict:
    """Jaccard overlap of the top-k steps under alpha and under event-level Shapley magnitude."""
    cfg = cfg or AttributionConfig()
    predict = predict or model_value_fn(model)
    alpha = causal_attention_of(model, seq)
    cut = temporal_prune(seq, predict, cfg.tolerance)
    _, ev, steps = event_level(seq, predict, cut, cfg)
    top_alpha = [int(i) for i in np.argsort(-alpha, kind="stable")[:k]]
    top_shap = [steps[i] for i in _top(ev.values[1:], k)]
    return {"patient_id": seq.patient_id, "k": k, "overlap": jaccard(top_alpha, top_shap),
            "top_alpha": top_alpha, "top_shapley": top_shap, "pruning_index": cut}
