import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctformer import attribution as A
from ctformer.data import SyntheticConfig, compute_deltas, generate_synthetic_cohort, fit_normalization, zscore_normalize
from ctformer.model import CTFormer, ModelConfig, make_batch
from oracles import shapley_permutations


@pytest.fixture(scope="module")
def tiny():
    """Untrained 4-feature model and a few short normalised sequences."""
    cohort = generate_synthetic_cohort(SyntheticConfig(n_patients=6, n_features=4, t_max=10, rng_seed=8))
    cohort = zscore_normalize(cohort, fit_normalization(cohort))
    model = CTFormer(ModelConfig(n_features=4, t_max=10, d_h=8, backbone_units=8, n_layers=1, n_heads=2), seed=1)
    model.fusion.w_cls.data *= 6  # spread outputs so attributions are not all ~0
    return model, cohort


# ---------------------------------------------------------------- perturbation

def test_perturb_empty_is_identity(tiny):
    _, cohort = tiny
    seq = cohort[0]
    out = A.perturb_sequence(seq)
    for name in ("values", "obs_mask", "feature_delta", "step_delta", "timestamps"):
        np.testing.assert_array_equal(getattr(out, name), getattr(seq, name))


def test_perturb_step_recomputes_deltas(tiny):
    _, cohort = tiny
    seq = cohort[1]
    t = 2
    out = A.perturb_sequence(seq, off_events=[t])
    assert not out.obs_mask[t].any() and not out.values[t].any()
    fd, sd = compute_deltas(seq.timestamps, out.obs_mask)
    np.testing.assert_array_equal(out.feature_delta, fd)
    np.testing.assert_array_equal(out.step_delta, seq.step_delta)
    out.validate()


def test_perturb_everything_is_background_and_range_checked(tiny):
    _, cohort = tiny
    seq = cohort[2]
    bg = A.perturb_sequence(seq, off_events=range(seq.t_valid))
    assert not bg.obs_mask.any()
    bg.validate()
    with pytest.raises(IndexError):
        A.perturb_sequence(seq, off_events=[seq.t_valid])


def test_batched_inputs_match_single_perturbations(tiny):
    _, cohort = tiny
    seq = cohort[3]
    rng = np.random.default_rng(0)
    off = rng.random((5,) + seq.values.shape) < 0.3
    off[:, seq.t_valid:] = False
    batch = A.perturbed_inputs(seq, off)
    for i in range(5):
        single = make_batch([A.apply_cell_mask(seq, off[i])])
        np.testing.assert_array_equal(batch.u[i], single.u[0])
        np.testing.assert_array_equal(batch.dt[i], single.dt[0])


# ------------------------------------------------------------------- games

def test_two_player_example():
    v = {frozenset(): 0.0, frozenset({0}): 1.0, frozenset({1}): 2.0, frozenset({0, 1}): 4.0}
    phi = A.exact_shapley(A.CoalitionGame.from_function(2, v.__getitem__)).values
    np.testing.assert_allclose(phi, [1.5, 2.5], rtol=0, atol=1e-15)


def test_additive_and_symmetric_games():
    c = np.array([0.5, -1.0, 2.0, 0.25])
    phi = A.exact_shapley(A.CoalitionGame.from_function(4, lambda s: sum(c[i] for i in s))).values
    np.testing.assert_allclose(phi, c, rtol=0, atol=1e-14)
    sym = A.exact_shapley(A.CoalitionGame.from_function(3, lambda s: len(s) ** 2)).values
    assert sym[0] == pytest.approx(sym[1], abs=1e-14) == pytest.approx(sym[2], abs=1e-14)


def test_exact_limit_points_to_sampling():
    with pytest.raises(ValueError, match="sampled_shapley"):
        A.exact_shapley(A.CoalitionGame.from_function(16, len))


def random_game(n, seed):
    rng = np.random.default_rng(seed)
    table = rng.standard_normal(1 << n)
    return lambda s: float(table[sum(1 << i for i in s)])


@given(st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_exact_matches_permutation_oracle(n, seed):
    fn = random_game(n, seed)
    phi = A.exact_shapley(A.CoalitionGame.from_function(n, fn)).values
    np.testing.assert_allclose(phi, shapley_permutations(n, fn), rtol=0, atol=1e-12)
    assert phi.sum() == pytest.approx(fn(frozenset(range(n))) - fn(frozenset()), abs=1e-12)


def test_null_player_exact():
    base = random_game(3, 4)
    fn = lambda s: base(frozenset(i for i in s if i != 3))
    phi = A.exact_shapley(A.CoalitionGame.from_function(4, fn)).values
    assert phi[3] == 0.0


def logistic_game(n, seed):
    """Probability-valued game with pairwise interactions, like a model output."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(n)
    inter = np.triu(rng.standard_normal((n, n)) * 0.5, 1)

    def fn(s):
        x = np.zeros(n)
        x[list(s)] = 1.0
        return float(1.0 / (1.0 + np.exp(-(w @ x + x @ inter @ x - 0.5))))
    return fn


@pytest.mark.parametrize("n", [3, 6, 10])
def test_sampled_close_to_exact(n):
    fn = logistic_game(n, n)
    exact = A.exact_shapley(A.CoalitionGame.from_function(n, fn)).values
    res = A.sampled_shapley(A.CoalitionGame.from_function(n, fn), 5000, seed=1)
    assert np.max(np.abs(res.values - exact)) < 0.01
    again = A.sampled_shapley(A.CoalitionGame.from_function(n, fn), 5000, seed=1)
    np.testing.assert_array_equal(res.values, again.values)
    target = fn(frozenset(range(n))) - fn(frozenset())
    assert abs(res.values.sum() - target) < 1e-12


def test_sampled_requires_a_permutation():
    with pytest.raises(ValueError):
        A.sampled_shapley(A.CoalitionGame.from_function(2, len), 0)


# ----------------------------------------------------------------- pruning

def test_pruning_extremes_and_monotonicity(tiny):
    model, cohort = tiny
    predict = A.model_value_fn(model)
    for seq in cohort[:3]:
        assert A.temporal_prune(seq, predict, np.inf) == seq.t_valid - 1
        curve = A._prefix_curve(seq, predict)
        assert curve[0] == 0.0
        if np.all(np.abs(curve[1:]) > 0):
            assert A.temporal_prune(seq, predict, 0.0) == 0
        cuts = [A.temporal_prune(seq, predict, eta) for eta in (0.0, 1e-3, 1e-2, 0.05, 0.2, 1.0)]
        assert cuts == sorted(cuts)
    with pytest.raises(ValueError):
        A.temporal_prune(cohort[0], predict, -1.0)


def test_prefix_curve_matches_two_player_game(tiny):
    model, cohort = tiny
    seq = cohort[4]
    predict = A.model_value_fn(model)
    curve = A._prefix_curve(seq, predict)
    for cut in (1, seq.t_valid // 2, seq.t_valid - 1):
        cells = np.stack([A._step_cells(seq, range(cut)), A._step_cells(seq, range(cut, seq.t_valid))])
        phi = A.exact_shapley(A.CellGame(seq, predict, cells)).values
        assert curve[cut] == pytest.approx(phi[0], abs=1e-12)


# ----------------------------------------------------------------- reports

def test_report_efficiency_exact(tiny, tmp_path):
    model, cohort = tiny
    seq = cohort[0]
    cfg = A.AttributionConfig(tolerance=0.01, exact_max_players=15, top_events=2, top_features=2)
    rep = A.explain(seq, model, cfg)
    for level, gap in rep.efficiency_gaps().items():
        assert abs(gap) < 1e-6, level
    assert rep.metadata["event_mode"] == "exact"
    probs = model.predict_proba([seq])
    assert rep.full_value == pytest.approx(probs[0], abs=1e-12)
    rep.write(tmp_path)
    back = json.loads((tmp_path / f"{seq.patient_id}.json").read_text())
    assert back["pruning_index"] == rep.pruning_index
    for suffix in ("events", "features", "cells", "pruning"):
        assert (tmp_path / f"{seq.patient_id}_{suffix}.csv").exists()


def test_report_efficiency_sampled_and_deterministic(tiny):
    model, cohort = tiny
    seq = cohort[1]
    cfg = A.AttributionConfig(tolerance=0.0, exact_max_players=2, n_permutations=30)
    rep = A.explain(seq, model, cfg)
    assert rep.metadata["event_mode"] == "sampled"
    for gap in rep.efficiency_gaps().values():
        assert abs(gap) < 1e-9
    assert A.explain(seq, model, cfg).to_json() == rep.to_json()


def test_unobserved_feature_is_null_player(tiny):
    model, cohort = tiny
    seq = A.perturb_sequence(cohort[2], off_features=[1])
    cfg = A.AttributionConfig(tolerance=0.01, exact_max_players=15)
    _, res = A.feature_level(seq, A.model_value_fn(model), 2, cfg)
    assert res.values[1 + 1] == 0.0


def test_jaccard_examples():
    assert A.jaccard([1, 2, 3], [3, 2, 1]) == 1.0
    assert A.jaccard([1, 2, 3], [4, 5, 6]) == 0.0
    assert A.jaccard([1, 2], [2, 3]) == pytest.approx(1 / 3)


def test_alignment_check_fields(tiny):
    model, cohort = tiny
    out = A.alignment_check(model, cohort[0], k=3, cfg=A.AttributionConfig(exact_max_players=15))
    assert 0.0 <= out["overlap"] <= 1.0
    assert len(out["top_alpha"]) == 3 and len(out["top_shapley"]) <= 3
    assert all(t >= out["pruning_index"] for t in out["top_shapley"])
