import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmtl import tensor as T
from mmtl.tensor import Tape, Tensor, backward


def P(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def fd_check(fn, inputs, eps=1e-6, tol=1e-4):
    """Compare backprop against central differences for ``sum(fn(*inputs) * w)``."""
    rng = np.random.default_rng(42)
    w = rng.normal(size=fn(*inputs).shape)
    with Tape() as tape:
        loss = T.sum(T.mul_const(fn(*inputs), w))
    backward(loss, tape, params=inputs)
    for x in inputs:
        flat = x.data.reshape(-1)
        g = x.grad.reshape(-1)
        for i in range(flat.size):
            o = flat[i]
            flat[i] = o + eps
            up = float((fn(*inputs).data * w).sum())
            flat[i] = o - eps
            down = float((fn(*inputs).data * w).sum())
            flat[i] = o
            num = (up - down) / (2 * eps)
            assert abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-8) < tol or abs(num - g[i]) < 1e-9


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    B = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(B)).data, B)


def test_matmul_scalar_case():
    assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    oracle = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                oracle[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(T.matmul(Tensor(a), Tensor(b)).data - oracle)) < 1e-12


def test_matmul_shape_error_names_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


# ---------------------------------------------------------------- elementwise


def test_tanh_sigmoid_at_zero():
    z = Tensor(np.zeros((2, 3)))
    np.testing.assert_array_equal(T.elementwise("tanh", z).data, 0.0)
    np.testing.assert_array_equal(T.elementwise("sigmoid", z).data, 0.5)


def test_tanh_backward_matches_fd_at_half():
    x = P([0.5])
    with Tape() as tape:
        y = T.sum(T.tanh(x))
    backward(y, tape)
    eps = 1e-6
    num = (np.tanh(0.5 + eps) - np.tanh(0.5 - eps)) / (2 * eps)
    assert abs(x.grad[0] - num) / abs(num) < 1e-6


def test_elementwise_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.elementwise("add", Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
    with pytest.raises(T.ShapeError):
        T.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_unknown_elementwise_op():
    with pytest.raises(ValueError):
        T.elementwise("exp", Tensor(np.zeros(2)))


def test_bias_must_match_rows():
    with pytest.raises(T.ShapeError):
        T.add_bias(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


def test_sigmoid_is_stable_for_large_inputs():
    y = T.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    np.testing.assert_allclose(y, [0.0, 0.5, 1.0])
    assert np.all(np.isfinite(y))


# ---------------------------------------------------------------- softmax


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_row(Tensor(np.zeros(3))).data, [1 / 3] * 3, atol=1e-15)
    assert T.softmax_row(Tensor(np.array([123.4]))).data.tolist() == [1.0]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
def test_softmax_sums_to_one_and_is_shift_invariant(x):
    y = T.softmax_row(Tensor(x)).data
    assert abs(y.sum() - 1.0) < 1e-12
    y2 = T.softmax_row(Tensor(x + 1000.0)).data
    assert np.max(np.abs(y - y2)) < 1e-12


# ---------------------------------------------------------------- masked mean


def test_masked_mean_examples():
    r = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(T.masked_mean(Tensor(np.tile(r, (4, 1))), np.ones(4)).data, r)
    rows = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_array_equal(T.masked_mean(Tensor(rows), [0, 1, 0]).data, rows[1])
    hand = [(rows[0, j] + rows[1, j]) / 2 for j in range(5)]
    assert np.max(np.abs(T.masked_mean(Tensor(rows), [1, 1, 0]).data - hand)) < 1e-15


def test_masked_mean_all_zero_mask():
    with pytest.raises(T.DegenerateInputError):
        T.masked_mean(Tensor(np.ones((3, 2))), np.zeros(3))


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    p = P(np.random.default_rng(0).normal(size=(2, 3)))
    with Tape() as tape:
        loss = T.sum(p)
    backward(loss, tape)
    np.testing.assert_array_equal(p.grad, 1.0)


def test_backward_dot_self():
    p = P([1.0, -2.0, 0.5])
    with Tape() as tape:
        loss = T.dot(p, p)
    backward(loss, tape)
    np.testing.assert_array_equal(p.grad, 2 * p.data)


def test_fan_out_accumulates():
    x = P([1.0, 2.0])
    with Tape() as tape:
        loss = T.add(T.sum(x), T.sum(x))
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_nonscalar_loss_rejected():
    x = P([1.0, 2.0])
    with Tape() as tape:
        y = T.tanh(x)
    with pytest.raises(T.ContractError):
        backward(y, tape)


def test_unreachable_param_gets_zero_grad():
    x, unused = P([1.0]), P([5.0, 6.0])
    unused.grad = np.array([9.0, 9.0])
    with Tape() as tape:
        loss = T.sum(x)
    backward(loss, tape, params=[x, unused])
    np.testing.assert_array_equal(unused.grad, 0.0)


def test_tape_records_in_execution_order():
    x = P([0.3, 0.1])
    with Tape() as tape:
        a = T.tanh(x)
        b = T.sigmoid(a)
        c = T.sum(b)
    assert [n.output for n in tape.nodes] == [a, b, c]


def test_no_recording_without_tape_or_grad():
    with Tape() as tape:
        T.tanh(Tensor(np.zeros(2)))
    assert len(tape) == 0


def test_debug_mode_catches_non_finite():
    prev = T.set_debug(True)
    try:
        with pytest.raises(T.NonFiniteError):
            T.scale(Tensor(np.array([np.inf])), 1.0)
    finally:
        T.set_debug(prev)


# ---------------------------------------------------------------- finite-difference coverage of every op


def _r(*shape, seed=0):
    return P(np.random.default_rng(seed + sum(shape)).normal(size=shape))


OPS = {
    "matmul": (T.matmul, lambda: [_r(3, 4), _r(4, 2, seed=1)]),
    "transpose": (T.transpose, lambda: [_r(3, 4)]),
    "reshape": (lambda x: T.reshape(x, (2, 6)), lambda: [_r(3, 4)]),
    "add": (T.add, lambda: [_r(2, 3), _r(2, 3, seed=1)]),
    "sub": (T.sub, lambda: [_r(2, 3), _r(2, 3, seed=1)]),
    "mul": (T.mul, lambda: [_r(2, 3), _r(2, 3, seed=1)]),
    "tanh": (T.tanh, lambda: [_r(2, 3)]),
    "sigmoid": (T.sigmoid, lambda: [_r(2, 3)]),
    "relu": (T.relu, lambda: [P([[0.5, -0.7, 1.3], [-2.0, 0.2, 0.9]])]),
    "add_bias": (T.add_bias, lambda: [_r(4, 3), _r(3, seed=1)]),
    "scale": (lambda x: T.scale(x, -1.7), lambda: [_r(2, 3)]),
    "mul_const": (lambda x: T.mul_const(x, [[0.0, 2.0, 1.0]]), lambda: [_r(1, 3)]),
    "tile_rows": (lambda v: T.tile_rows(v, 3), lambda: [_r(4)]),
    "sum": (lambda x: T.reshape(T.sum(x), (1,)), lambda: [_r(2, 3)]),
    "sum_rows": (T.sum_rows, lambda: [_r(2, 3, 4)]),
    "dot": (lambda a, b: T.reshape(T.dot(a, b), (1,)), lambda: [_r(5), _r(5, seed=1)]),
    "softmax_row": (T.softmax_row, lambda: [_r(3, 5)]),
    "log_softmax_rows": (T.log_softmax_rows, lambda: [_r(3, 5)]),
    "masked_mean_2d": (lambda h: T.masked_mean(h, [1, 0, 1, 1]), lambda: [_r(4, 3)]),
    "masked_mean_3d": (lambda h: T.masked_mean(h, [[1, 1, 0], [1, 0, 0]]), lambda: [_r(2, 3, 4)]),
    "nll_rows": (lambda x: T.reshape(T.nll_rows(x, [1, 4, 0], [0.5, 1.0, 0.0]), (1,)), lambda: [_r(3, 5)]),
    "l2_normalize_rows": (T.l2_normalize_rows, lambda: [_r(3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], axis=-1), lambda: [_r(2, 3), _r(2, 2, seed=1)]),
    "stack": (lambda a, b: T.stack([a, b], axis=1), lambda: [_r(2, 3), _r(2, 3, seed=1)]),
    "embedding": (lambda t: T.embedding(t, [[1, 3], [3, 0]]), lambda: [_r(5, 3)]),
    "gru_step": (
        lambda h, x, W, U, b: T.gru_step(h, x, W, U, b, mask=[1.0, 0.0, 1.0], rmask=np.full((3, 4), 1.25)),
        lambda: [_r(3, 4), _r(3, 5, seed=1), _r(5, 12, seed=2), _r(4, 12, seed=3), _r(12, seed=4)],
    ),
    "attention": (
        lambda d, k, Wa, va, hs: T.attention(d, k, Wa, va, hs, [[1, 1, 0], [1, 1, 1]])[0],
        lambda: [_r(2, 4), _r(2, 3, 5, seed=1), _r(4, 5, seed=2), _r(5, seed=3), _r(2, 3, 6, seed=4)],
    ),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_backward_matches_finite_differences(name):
    fn, make = OPS[name]
    fd_check(fn, make())


def test_attention_masked_positions_get_exact_zero():
    rng = np.random.default_rng(0)
    d, keys = Tensor(rng.normal(size=(1, 3))), Tensor(rng.normal(size=(1, 4, 2)))
    ctx, alpha = T.attention(d, keys, Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=2)),
                             Tensor(rng.normal(size=(1, 4, 5))), [[1, 0, 1, 0]])
    assert alpha[0, 1] == 0.0 and alpha[0, 3] == 0.0
    assert abs(alpha.sum() - 1.0) < 1e-12


def test_attention_all_masked_is_degenerate():
    with pytest.raises(T.DegenerateInputError):
        T.attention(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((2, 2))),
                    Tensor(np.zeros(2)), Tensor(np.zeros((1, 2, 3))), [[0, 0]])
