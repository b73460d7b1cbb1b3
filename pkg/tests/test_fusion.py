import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctformer import engine as E
from ctformer import fusion as Fu
from ctformer.model import CTFormer, ModelConfig, make_batch


def zero_params(d):
    return Fu.FusionParams(E.tensor(np.zeros((d, 2 * d))), E.tensor(np.zeros(d)),
                           E.tensor(np.zeros((1, d))), E.tensor(np.zeros(1)))


def test_equal_inputs_pass_through(rng):
    p = Fu.init_fusion(rng, 4)
    g = rng.standard_normal((3, 4))
    _, h = Fu.gated_fusion(g, g, p)
    np.testing.assert_allclose(h.data, g, rtol=0, atol=1e-15)


def test_zero_gate_weights_average(rng):
    p = zero_params(4)
    g, l = rng.standard_normal(4), rng.standard_normal(4)
    gate, h = Fu.gated_fusion(g, l, p)
    assert np.all(gate.data == 0.5)
    np.testing.assert_allclose(h.data, (g + l) / 2, rtol=0, atol=1e-15)


@given(st.integers(0, 2 ** 31 - 1))
def test_gate_range_and_interpolation(seed):
    rng = np.random.default_rng(seed)
    p = Fu.init_fusion(rng, 5)
    p.w_g.data *= 10
    g, l = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    gate, h = Fu.gated_fusion(g, l, p)
    assert np.all((gate.data > 0) & (gate.data < 1))
    assert np.all(h.data >= np.minimum(g, l) - 1e-12) and np.all(h.data <= np.maximum(g, l) + 1e-12)


def test_dimension_mismatch():
    with pytest.raises(E.ShapeError):
        Fu.gated_fusion(np.zeros(4), np.zeros(3), zero_params(4))


def test_predict_values():
    p = zero_params(3)
    assert Fu.predict(np.ones(3), p).item() == 0.5
    p.b_cls.data[:] = -2.0
    np.testing.assert_allclose(Fu.predict(np.ones(3), p).item(), 0.11920292202211755, rtol=0, atol=1e-15)
    h = np.random.default_rng(0).standard_normal(3)
    q = Fu.init_fusion(np.random.default_rng(1), 3)
    probs = []
    for b in (-1.0, 0.0, 1.0):
        q.b_cls.data[:] = b
        probs.append(Fu.predict(h, q).item())
    assert probs[0] < probs[1] < probs[2]


def test_loss_reduces_to_ce_and_examples():
    y_hat = E.tensor(np.array([0.99]))
    b = E.tensor(np.random.default_rng(0).uniform(0, 1, (1, 4, 4)))
    ce = Fu.stage2_loss(y_hat, np.array([1.0]), b, 0.0, [4]).item()
    np.testing.assert_allclose(ce, -np.log(0.99), rtol=1e-12)
    assert abs(ce - 0.01005) < 1e-5
    with pytest.raises(ValueError):
        Fu.stage2_loss(y_hat, np.array([1.0]), b, -1.0, [4])


def test_penalty_is_homogeneous_and_uses_valid_lower_entries():
    y_hat, y = E.tensor(np.array([0.7])), np.array([1.0])
    b = np.zeros((1, 4, 4))
    b[0, 2, 0], b[0, 2, 1], b[0, 3, 0], b[0, 0, 1] = 0.6, 0.3, 50.0, 9.0
    ce = Fu.stage2_loss(y_hat, y, E.tensor(b), 0.0, [3]).item()
    pen1 = Fu.stage2_loss(y_hat, y, E.tensor(b), 1.0, [3]).item() - ce
    pen2 = Fu.stage2_loss(y_hat, y, E.tensor(2 * b), 1.0, [3]).item() - ce
    # valid strictly-lower entries for t_valid=3: (1,0), (2,0), (2,1)
    np.testing.assert_allclose(pen1, 0.9 / 3, rtol=1e-12)
    np.testing.assert_allclose(pen2, 2 * pen1, rtol=1e-12)


def test_stage2_loss_gradients(rng):
    cfg = ModelConfig(n_features=3, t_max=5, d_h=4, backbone_units=4, n_layers=1, n_heads=2)
    m = CTFormer(cfg, seed=0)
    h = E.tensor(rng.standard_normal((3, 5, 4)))
    g = E.tensor(rng.standard_normal((3, 4)))
    attn = E.tensor(np.tril(rng.dirichlet(np.ones(5), size=(3, 5))))
    lengths = np.array([5, 4, 2])
    y = np.array([1.0, 0.0, 1.0])
    m.stage2["causal.w_c"].data += 0.3 * rng.standard_normal((5, 5))

    def loss():
        out = m.stage2_forward(h, g, attn, lengths)
        return Fu.stage2_loss(out["prob"], y, out["B"], 0.1, lengths)

    rep = E.check_gradients(loss, list(m.stage2.values()))
    assert rep.max_rel_error < 1e-4


def test_full_model_gradients_tiny(rng):
    from ctformer.data import SyntheticConfig, generate_synthetic_cohort
    cohort = generate_synthetic_cohort(SyntheticConfig(n_patients=3, n_features=3, t_max=8, rng_seed=1))
    cfg = ModelConfig(n_features=3, t_max=8, d_h=4, backbone_units=4, n_layers=1, n_heads=2)
    m = CTFormer(cfg, seed=2)
    batch = make_batch(cohort)
    batch.u[..., :3] /= np.maximum(np.abs(batch.u[..., :3]).max(axis=(0, 1)), 1.0)
    params = list(m.stage1.values())

    def loss():
        return E.binary_cross_entropy(m.stage1_forward(batch)["prob"], batch.y)

    rep = E.check_gradients(loss, params)
    assert rep.max_rel_error < 1e-4
