import math

import numpy as np
import pytest

from memlm import autograd as ag
from oracles import finite_difference, max_rel_error, naive_lstm_cell, naive_softmax


def t64(arr, requires_grad=True):
    return ag.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def check_op(builder, arrays, tol=1e-4, eps=1e-5):
    """Compare analytic gradients of sum(builder(tensors)) to central differences."""
    tensors = [t64(a) for a in arrays]
    loss = ag.sum_all(builder(*tensors))
    ag.backward(loss)
    analytic = [p.grad.copy() for p in tensors]

    def f():
        with ag.no_grad():
            fresh = [ag.Tensor(p.data) for p in tensors]
            return float(ag.sum_all(builder(*fresh)).data)

    numeric = finite_difference(f, [p.data for p in tensors], eps=eps)
    assert max_rel_error(analytic, numeric) < tol


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    b = t64([[1.0, 2.0], [3.0, 4.0]])
    eye = t64(np.eye(2), requires_grad=False)
    out = ag.matmul(eye, b)
    assert np.allclose(out.data, b.data)


def test_matmul_hand_values():
    a = t64([[1.0, 2.0], [3.0, 4.0]])
    b = t64([[1.0], [1.0]])
    assert np.allclose(ag.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        ag.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_matmul_gradient_example():
    rng = np.random.default_rng(0)
    check_op(ag.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], tol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_matmul_gradients(seed):
    rng = np.random.default_rng(seed)
    check_op(ag.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])
    check_op(lambda a, b: ag.matmul(a, b, transpose_b=True),
             [rng.normal(size=(3, 4)), rng.normal(size=(2, 4))])


# ---------------------------------------------------------------------------
# elementwise / broadcast


def test_tanh_zero():
    assert ag.tanh(t64([0.0])).data[0] == 0.0


def test_broadcast_add_column_values():
    out = ag.broadcast_add_column(t64(np.zeros((2, 3))), t64([1.0, 2.0]))
    assert np.allclose(out.data, [[1, 1, 1], [2, 2, 2]])


def test_broadcast_add_column_grad_is_row_sum():
    m = t64(np.zeros((2, 3)))
    v = t64([1.0, 2.0])
    out = ag.broadcast_add_column(m, v)
    up = np.arange(6, dtype=np.float64).reshape(2, 3)
    ag.backward(ag.sum_all(ag.mul(out, t64(up, requires_grad=False))))
    assert np.allclose(v.grad, up.sum(axis=1))


@pytest.mark.parametrize("seed", range(20))
def test_elementwise_gradients(seed):
    rng = np.random.default_rng(seed)
    check_op(ag.add, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))])
    check_op(ag.mul, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))])
    check_op(ag.mul, [rng.normal(size=(3, 4)), rng.normal(size=(3, 1))])
    check_op(ag.tanh, [rng.normal(size=(3, 4))])
    check_op(ag.sigmoid, [rng.normal(size=(3, 4))])
    check_op(ag.add_rowvec, [rng.normal(size=(3, 4)), rng.normal(size=4)])
    check_op(ag.broadcast_add_column, [rng.normal(size=(4, 3)), rng.normal(size=4)])
    check_op(ag.matvec, [rng.normal(size=(3, 4)), rng.normal(size=4)])
    check_op(lambda x: ag.concat_cols(ag.split_cols(x, 2)), [rng.normal(size=(3, 4))])
    check_op(lambda a, b: ag.stack_cols([ag.matvec(a, b), ag.matvec(a, b)]),
             [rng.normal(size=(3, 4)), rng.normal(size=4)])


def test_add_shape_mismatch():
    with pytest.raises(ValueError):
        ag.add(t64(np.ones((2, 2))), t64(np.ones((2, 3))))


def test_mixed_precision_rejected():
    a = ag.Tensor(np.ones((2, 2), dtype=np.float32))
    b = ag.Tensor(np.ones((2, 2), dtype=np.float64))
    with pytest.raises(TypeError):
        ag.add(a, b)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform():
    out = ag.softmax_row(t64([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3] * 3)


def test_softmax_extreme_magnitude_is_finite():
    out = ag.softmax_row(t64([1e4, 0.0]))
    assert np.all(np.isfinite(out.data))
    assert np.allclose(out.data, [1.0, 0.0])


def test_softmax_log_integthose():
    out = ag.softmax_row(t64([math.log(1), math.log(2), math.log(3)]))
    assert np.allclose(out.data, [1 / 6, 2 / 6, 3 / 6])


def test_softmax_row_masked_entries_exact_zero():
    out = ag.softmax_row(t64([5.0, 1.0, 2.0]), mask=[True, False, True])
    assert out.data[1] == 0.0
    assert abs(out.data.sum() - 1.0) < 1e-6


def test_softmax_row_all_masked_raises():
    with pytest.raises(ValueError):
        ag.softmax_row(t64([1.0, 2.0]), mask=[False, False])


def test_masked_softmax_empty_rows():
    scores = t64(np.zeros((2, 3)))
    mask = np.array([[True, True, False], [False, False, False]])
    with pytest.raises(ValueError):
        ag.masked_softmax(scores, mask)
    out = ag.masked_softmax(scores, mask, allow_empty=True)
    assert np.allclose(out.data[0], [0.5, 0.5, 0.0])
    assert np.all(out.data[1] == 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_softmax_gradients(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    weights = rng.normal(size=(3, 5))
    check_op(lambda s: ag.mul(ag.masked_softmax(s, mask), t64(weights, requires_grad=False)),
             [rng.normal(size=(3, 5))])
    check_op(lambda s: ag.mul(ag.softmax_rows(s), t64(weights, requires_grad=False)),
             [rng.normal(size=(3, 5))])


def test_softmax_probability_vector_property():
    rng = np.random.default_rng(0)
    for _ in range(20):
        scores = rng.uniform(-1e4, 1e4, size=(4, 6))
        mask = rng.random((4, 6)) < 0.6
        mask[:, 2] = True
        out = ag.masked_softmax(ag.Tensor(scores), mask, allow_empty=True)
        assert np.all(out.data >= 0)
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(out.data[~mask] == 0.0)


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_uniform():
    logits = t64(np.zeros(10))
    loss = ag.cross_entropy(logits, 3)
    assert abs(float(loss.data) - math.log(10)) < 1e-12


def test_cross_entropy_peaked_stable():
    logits = np.zeros(7)
    logits[2] = 1e4
    loss = ag.cross_entropy(t64(logits), 2)
    assert np.isfinite(loss.data)
    assert float(loss.data) < 1e-6


def test_cross_entropy_target_out_of_range():
    with pytest.raises(ValueError):
        ag.cross_entropy(t64(np.zeros(5)), 5)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(1)
    raw = rng.normal(size=7)
    logits = t64(raw)
    ag.backward(ag.cross_entropy(logits, 4))
    expect = naive_softmax(raw)
    expect[4] -= 1.0
    assert np.allclose(logits.grad, expect, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_cross_entropy_fd(seed):
    rng = np.random.default_rng(seed)
    target = int(rng.integers(0, 7))
    check_op(lambda x: ag.cross_entropy(x, target), [rng.normal(size=7)])
    targets = rng.integers(0, 5, size=3)
    check_op(lambda x: ag.sum_all(ag.cross_entropy_rows(x, targets)),
             [rng.normal(size=(3, 5))])


# ---------------------------------------------------------------------------
# LSTM cell


def lstm_arrays(rng, w, k):
    return [rng.normal(size=s) * 0.5 for s in
            [(w,), (k,), (k,), (4 * k, w), (4 * k, k), (4 * k,)]]


def test_lstm_zero_everything():
    k, w = 4, 3
    params = ag.LstmParams(*(t64(np.zeros(s)) for s in [(4 * k, w), (4 * k, k), (4 * k,)]))
    h, c = ag.lstm_cell(t64(np.zeros(w)), t64(np.zeros(k)), t64(np.zeros(k)), params)
    assert np.all(h.data == 0.0)


def test_lstm_saturated_forget_carries_cell():
    k, w = 4, 3
    b = np.zeros(4 * k)
    b[:k] = -1e4       # input gate closed
    b[k:2 * k] = 1e4   # forget gate open
    b[3 * k:] = -1e4   # output gate closed
    params = ag.LstmParams(t64(np.zeros((4 * k, w))), t64(np.zeros((4 * k, k))), t64(b))
    c_prev = np.array([0.3, -0.2, 0.5, 0.0])
    h, c = ag.lstm_cell(t64(np.zeros(w)), t64(np.zeros(k)), t64(c_prev), params)
    assert np.allclose(c.data, c_prev)
    assert np.allclose(h.data, 0.0, atol=1e-12)


def test_lstm_matches_naive():
    rng = np.random.default_rng(7)
    x, h, c, wx, wh, b = lstm_arrays(rng, 3, 4)
    params = ag.LstmParams(t64(wx), t64(wh), t64(b))
    hn, cn = naive_lstm_cell(x, h, c, wx, wh, b)
    ho, co = ag.lstm_cell(t64(x), t64(h), t64(c), params)
    assert np.allclose(ho.data, hn, atol=1e-12)
    assert np.allclose(co.data, cn, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_lstm_gradients(seed):
    rng = np.random.default_rng(seed + 100)
    arrays = lstm_arrays(rng, 3, 4)
    up_h = rng.normal(size=4)
    up_c = rng.normal(size=4)

    def build(x, h, c, wx, wh, b):
        hn, cn = ag.lstm_cell(x, h, c, ag.LstmParams(wx, wh, b))
        weighted = ag.add(ag.mul(hn, t64(up_h, requires_grad=False)),
                          ag.mul(cn, t64(up_c, requires_grad=False)))
        return weighted

    check_op(build, arrays)


def test_lstm_dimension_mismatch():
    params = ag.LstmParams(t64(np.zeros((16, 3))), t64(np.zeros((16, 4))), t64(np.zeros(16)))
    with pytest.raises(ValueError):
        ag.lstm_cell(t64(np.zeros(5)), t64(np.zeros(4)), t64(np.zeros(4)), params)


# ---------------------------------------------------------------------------
# init + grad_check


def test_init_uniform_deterministic():
    a = ag.init_uniform((2, 2), -0.1, 0.1, seed=7)
    b = ag.init_uniform((2, 2), -0.1, 0.1, seed=7)
    assert np.array_equal(a.data, b.data)
    c = ag.init_uniform((2, 2), -0.1, 0.1, seed=8)
    assert not np.array_equal(a.data, c.data)


def test_init_uniform_mean():
    big = ag.init_uniform((100000,), -0.1, 0.1, seed=3, dtype=np.float64)
    assert abs(float(big.data.mean())) < 0.002
    assert big.data.min() > -0.1 and big.data.max() < 0.1


def test_init_uniform_degenerate_range():
    with pytest.raises(ValueError):
        ag.init_uniform((2,), 0.5, 0.5, seed=0)


def test_grad_check_quadratic():
    theta = t64([3.0])

    def f(params):
        return ag.sum_all(ag.mul(params[0], params[0]))

    assert ag.grad_check(f, [theta], eps=1e-5) < 1e-8


def test_grad_check_constant():
    theta = t64([1.0, 2.0])

    def f(params):
        return ag.sum_all(ag.mul(params[0], ag.Tensor(np.zeros(2))))

    assert ag.grad_check(f, [theta], eps=1e-5) == 0.0


def test_grad_check_requires_float64():
    theta = ag.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        ag.grad_check(lambda p: ag.sum_all(p[0]), [theta])


def test_no_grad_blocks_tape():
    x = t64([1.0, 2.0])
    with ag.no_grad():
        y = ag.tanh(x)
    assert not y.requires_grad
    ag.backward(ag.sum_all(y))
    assert x.grad is None
