import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctformer import engine as E


def leaf(rng, *shape, scale=1.0):
    return E.tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def test_sigmoid_at_zero():
    x = E.tensor(np.array(0.0), requires_grad=True)
    y = E.sigmoid(x)
    y.backward()
    assert y.item() == 0.5
    assert x.grad == 0.25


def test_relu_values_and_grads():
    x = E.tensor(np.array([-1.0, 2.0]), requires_grad=True)
    E.sum_(E.relu(x)).backward()
    np.testing.assert_array_equal(E.relu(x).data, [0.0, 2.0])
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_matmul_finite_differences(rng):
    a, b = leaf(rng, 4, 3), leaf(rng, 3, 2)
    rep = E.check_gradients(lambda: E.sum_(E.tanh(a @ b)), [a, b])
    assert rep.max_rel_error < 1e-6


def test_quadratic_gradient_exact():
    x = E.tensor(np.array([3.0, 4.0]), requires_grad=True)
    rep = E.check_gradients(lambda: E.sum_(x * x) * 0.5, [x])
    np.testing.assert_allclose(x.grad, [3.0, 4.0], rtol=0, atol=0)
    assert rep.max_rel_error < 1e-9


def test_constant_loss_zero_gradient():
    x = E.tensor(np.ones(3), requires_grad=True)
    E.sum_(x * 0.0).backward()
    np.testing.assert_array_equal(x.grad, np.zeros(3))


@pytest.mark.parametrize("name,fn", [
    ("add_broadcast", lambda a, b, c: E.sum_((a + b[0]) * c)),
    ("sub", lambda a, b, c: E.sum_((a - c) * (a - c))),
    ("div_scalar", lambda a, b, c: E.sum_((a / 4.0) * c)),
    ("sigmoid", lambda a, b, c: E.sum_(E.sigmoid(a) * c)),
    ("tanh", lambda a, b, c: E.sum_(E.tanh(a) * c)),
    ("exp_log", lambda a, b, c: E.sum_(E.log(E.exp(a) + 1.0) * c)),
    ("abs", lambda a, b, c: E.sum_(E.abs_(a + 3.0) * c)),
    ("mean_axis", lambda a, b, c: E.sum_(E.tanh(E.mean(a * c, axis=0, keepdims=True)))),
    ("getitem", lambda a, b, c: E.sum_(a[1:, ::2] * c[1:, ::2])),
    ("fancy_getitem", lambda a, b, c: E.sum_(a[[0, 0, 2], [1, 1, 3]] * 2.0)),
    ("reshape_swap", lambda a, b, c: E.sum_(E.swapaxes(E.reshape(a, (4, 3)), 0, 1) @ E.reshape(c, (4, 3)))),
    ("concat", lambda a, b, c: E.sum_(E.concat([a, c], axis=0) * E.concat([c, a], axis=0))),
    ("transpose", lambda a, b, c: E.sum_(a.T @ c)),
    ("layer_norm", lambda a, b, c: E.sum_(E.layer_norm(a, b[0], b[1]) * c)),
    ("softmax_masked", lambda a, b, c: E.sum_(E.row_softmax_masked(a, np.tril(np.ones((3, 4), bool))) * c)),
    ("bce", lambda a, b, c: E.binary_cross_entropy(E.sigmoid(a), (c.data > 0).astype(float), pos_weight=2.0)),
    ("l1_masked", lambda a, b, c: E.sum_(E.l1_masked(a + 0.1, np.tril(np.ones((3, 4)), -1)))),
])
def test_isolated_op_gradients(name, fn, rng):
    a = leaf(rng, 3, 4)
    b = leaf(rng, 2, 4)
    c = leaf(rng, 3, 4)
    rep = E.check_gradients(lambda: fn(a, b, c), [a, b, c])
    assert rep.max_rel_error < 1e-6, (name, rep.worst)


def test_batched_matmul_shares_2d_weight(rng):
    x, w = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    out = E.matmul(x, w)
    np.testing.assert_allclose(out.data, np.einsum("btk,kd->btd", x.data, w.data))
    rep = E.check_gradients(lambda: E.sum_(E.tanh(E.matmul(x, w))), [x, w])
    assert rep.max_rel_error < 1e-6


def test_shape_error_names_both_shapes():
    with pytest.raises(E.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        E.tensor(np.ones((2, 3))) @ E.tensor(np.ones((4, 5)))
    with pytest.raises(E.ShapeError):
        E.tensor(np.ones((2, 3))) + E.tensor(np.ones((4, 3)))


def test_fully_masked_softmax_row_raises():
    with pytest.raises(ValueError, match="fully masked"):
        E.row_softmax_masked(E.tensor(np.zeros((2, 3))), np.array([[1, 0, 0], [0, 0, 0]], bool))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_masked_softmax_rows(rows, cols, seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((rows, cols)) < 0.6
    mask[np.arange(rows), rng.integers(0, cols, rows)] = True
    p = E.row_softmax_masked(E.tensor(rng.standard_normal((rows, cols)) * 5), mask).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p[~mask] == 0.0)


def test_bce_clamp_keeps_loss_finite():
    loss = E.binary_cross_entropy(E.tensor(np.array([0.0, 1.0])), np.array([1.0, 0.0]))
    assert np.isfinite(loss.item())
    np.testing.assert_allclose(loss.item(), -np.log(1e-7), rtol=1e-9)


def test_no_grad_builds_no_graph(rng):
    a = leaf(rng, 2, 2)
    with E.no_grad():
        assert not E.is_grad_enabled()
        out = E.sum_(a * a)
    assert E.is_grad_enabled()
    assert not out.requires_grad


def test_gradients_accumulate_until_zeroed(rng):
    a = leaf(rng, 3)
    E.sum_(a * 2.0).backward()
    E.sum_(a * 2.0).backward()
    np.testing.assert_array_equal(a.grad, np.full(3, 4.0))
    E.zero_grad([a])
    E.sum_(a * 2.0).backward()
    np.testing.assert_array_equal(a.grad, np.full(3, 2.0))


def test_backward_reproducible_bit_for_bit(rng):
    a, b = leaf(rng, 5, 4), leaf(rng, 4, 3)

    def run():
        E.zero_grad([a, b])
        E.sum_(E.tanh(a @ b) * E.sigmoid(a @ b)).backward()
        return a.grad.copy(), b.grad.copy()

    g1, g2 = run(), run()
    assert all(np.array_equal(x, y) for x, y in zip(g1, g2))


def test_shared_subexpression_gradient():
    x = E.tensor(np.array(2.0), requires_grad=True)
    y = x * x
    z = y * y + y   # x^4 + x^2 -> 4x^3 + 2x = 36
    z.backward()
    assert x.grad == 36.0


def test_check_gradients_rejects_nonfinite_loss():
    x = E.tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(FloatingPointError):
        E.check_gradients(lambda: E.sum_(x * np.inf), [x])


def test_custom_op_backward():
    x = E.tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = E.custom_op(x.data ** 3, [x], lambda g: (g * 3 * x.data ** 2,), "cube")
    E.sum_(y).backward()
    np.testing.assert_array_equal(x.grad, [3.0, 12.0])
