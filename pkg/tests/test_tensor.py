import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualcast.tensor import (
    NumericsError,
    ShapeError,
    Tape,
    Tensor,
    add,
    add_bias,
    attend,
    block_matmul,
    concat_cols,
    layer_norm,
    load_checkpoint,
    matmul,
    mean_rows,
    mse,
    mul,
    relu,
    repeat_rows,
    save_checkpoint,
    scale,
    sigmoid,
    softmax_rows,
    sub,
    sum_all,
    transpose,
)

from helpers import finite_difference_check


# --- matmul -----------------------------------------------------------------

def test_matmul_identity():
    m = np.random.default_rng(0).normal(size=(3, 3))
    out = matmul(Tensor(np.eye(3)), Tensor(m))
    assert np.array_equal(out.data, m)


def test_matmul_scalar_case():
    assert matmul(Tensor([[2.0]]), Tensor([[3.0]])).item() == 6.0


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3, 5))
    expected = np.zeros((4, 5))
    for i in range(4):
        for j in range(5):
            for k in range(3):
                expected[i, j] += a[i, k] * b[k, j]
    out = matmul(Tensor(a), Tensor(b)).data
    assert np.max(np.abs(out - expected)) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 10_000))
def test_matmul_associative(m, k, l, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-10, 10, size=(m, k))
    b = rng.uniform(-10, 10, size=(k, l))
    c = rng.uniform(-10, 10, size=(l, n))
    left = matmul(matmul(Tensor(a), Tensor(b)), Tensor(c)).data
    right = matmul(Tensor(a), matmul(Tensor(b), Tensor(c))).data
    denom = max(np.max(np.abs(left)), np.max(np.abs(right)), 1.0)
    assert np.max(np.abs(left - right)) / denom < 1e-9


# --- softmax ----------------------------------------------------------------

def test_softmax_uniform_row():
    out = softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data
    assert np.max(np.abs(out - 1 / 3)) < 1e-15


def test_softmax_closed_form():
    out = softmax_rows(Tensor([[0.0, math.log(2.0)]])).data
    assert abs(out[0, 0] - 1 / 3) < 1e-15
    assert abs(out[0, 1] - 2 / 3) < 1e-15


def test_softmax_shift_invariance_large_values():
    big = softmax_rows(Tensor([[1000.0, 1000.5]])).data
    small = softmax_rows(Tensor([[0.0, 0.5]])).data
    assert np.all(np.isfinite(big))
    assert np.max(np.abs(big - small)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(m, n, seed):
    x = np.random.default_rng(seed).uniform(-50, 50, size=(m, n))
    y = softmax_rows(Tensor(x)).data
    assert np.all(y >= 0)
    assert np.max(np.abs(y.sum(axis=1) - 1.0)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000), st.floats(-30, 30))
def test_softmax_row_shift_invariance(n, seed, shift):
    x = np.random.default_rng(seed).uniform(-5, 5, size=(2, n))
    base = softmax_rows(Tensor(x)).data
    shifted = softmax_rows(Tensor(x + shift)).data
    assert np.max(np.abs(base - shifted)) < 1e-12


# --- layer norm -------------------------------------------------------------

def _unit_affine(d):
    return Tensor(np.ones((1, d))), Tensor(np.zeros((1, d)))


def test_layer_norm_constant_row():
    gain, bias = _unit_affine(3)
    out = layer_norm(Tensor([[5.0, 5.0, 5.0]]), gain, bias).data
    assert np.array_equal(out, np.zeros((1, 3)))


def test_layer_norm_two_point_row():
    gain, bias = _unit_affine(2)
    out = layer_norm(Tensor([[1.0, 3.0]]), gain, bias).data
    # population variance of [1, 3] is 1, so the row normalises to [-1, 1]
    assert np.max(np.abs(out - np.array([[-1.0, 1.0]]))) < 1e-5


def test_layer_norm_against_scalar_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 8))
    gain = rng.normal(size=(1, 8))
    bias = rng.normal(size=(1, 8))
    eps = 1e-5
    expected = np.zeros_like(x)
    for i in range(3):
        row = x[i]
        mu = sum(row) / 8
        var = sum((v - mu) ** 2 for v in row) / 8
        for j in range(8):
            expected[i, j] = (row[j] - mu) / math.sqrt(var + eps) * gain[0, j] + bias[0, j]
    out = layer_norm(Tensor(x), Tensor(gain), Tensor(bias), eps).data
    assert np.max(np.abs(out - expected)) < 1e-10


def test_layer_norm_row_stats():
    x = np.random.default_rng(3).normal(size=(4, 16))
    gain, bias = _unit_affine(16)
    out = layer_norm(Tensor(x), gain, bias).data
    assert np.max(np.abs(out.mean(axis=1))) <= 1e-10
    assert np.max(np.abs(out.var(axis=1) - 1.0)) < 1e-3  # off by O(eps)


# --- elementwise family -----------------------------------------------------

def test_relu():
    out = relu(Tensor([[-1.0, 0.0, 2.0]])).data
    assert np.array_equal(out, [[0.0, 0.0, 2.0]])


def test_concat_cols_preserves_left_block():
    a = np.arange(6.0).reshape(2, 3)
    b = np.arange(4.0).reshape(2, 2) + 10
    out = concat_cols(Tensor(a), Tensor(b)).data
    assert out.shape == (2, 5)
    assert np.array_equal(out[:, :3], a)
    assert np.array_equal(out[:, 3:], b)


def test_mse_against_scalar_loop():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 5))
    y = rng.normal(size=(3, 5))
    total = 0.0
    for i in range(3):
        for j in range(5):
            total += (x[i, j] - y[i, j]) ** 2
    assert abs(mse(Tensor(x), Tensor(y)).item() - total / 15) < 1e-12


def test_transpose_and_repeat_and_mean():
    x = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(transpose(Tensor(x)).data, x.T)
    assert np.array_equal(repeat_rows(Tensor([[1.0, 2.0]]), 3).data, [[1, 2]] * 3)
    assert np.max(np.abs(mean_rows(Tensor(x)).data - [[3.0, 4.0]])) < 1e-15


def test_mean_rows_permutation_stable():
    x = np.random.default_rng(5).normal(size=(9, 4))
    perm = np.random.default_rng(6).permutation(9)
    a = mean_rows(Tensor(x)).data
    b = mean_rows(Tensor(x[perm])).data
    assert np.array_equal(a, b)


def test_attend_matches_matmul():
    rng = np.random.default_rng(7)
    w = rng.uniform(0, 1, size=(5, 5))
    v = rng.normal(size=(5, 3))
    assert np.max(np.abs(attend(Tensor(w), Tensor(v)).data - w @ v)) < 1e-12


def test_block_matmul_matches_per_block():
    rng = np.random.default_rng(8)
    mat = rng.normal(size=(3, 3))
    x = rng.normal(size=(9, 4))
    out = block_matmul(mat, Tensor(x), 3).data
    expected = np.concatenate([mat @ x[i * 3 : (i + 1) * 3] for i in range(3)])
    assert np.max(np.abs(out - expected)) < 1e-12


def test_overflow_raises_instead_of_inf():
    huge = Tensor(np.full((2, 2), 1e308))
    with pytest.raises(NumericsError):
        mul(huge, huge)


# --- backward ---------------------------------------------------------------

def test_backward_sum_gives_ones():
    w = Tensor(np.random.default_rng(9).normal(size=(3, 4)))
    tape = Tape()
    with tape:
        loss = sum_all(w)
    tape.backward(loss)
    assert np.array_equal(w.grad, np.ones((3, 4)))


def test_backward_linear_regression_closed_form():
    rng = np.random.default_rng(10)
    w = Tensor(rng.normal(size=(1, 4)))
    x = rng.normal(size=(4, 6))
    y = rng.normal(size=(1, 6))
    tape = Tape()
    with tape:
        pred = matmul(w, Tensor(x))
        loss = mse(pred, Tensor(y))
    tape.backward(loss)
    expected = (2.0 / 6) * (w.data @ x - y) @ x.T
    assert np.max(np.abs(w.grad - expected)) < 1e-10


def test_backward_requires_scalar():
    w = Tensor(np.ones((2, 2)))
    tape = Tape()
    with tape:
        out = add(w, w)
    with pytest.raises(ShapeError):
        tape.backward(out)


def test_backward_twice_doubles_gradients_exactly():
    rng = np.random.default_rng(11)
    w = Tensor(rng.normal(size=(3, 3)))
    x = Tensor(rng.normal(size=(3, 2)))
    tape = Tape()
    with tape:
        out = relu(matmul(w, x))
        loss = mse(out, Tensor(np.zeros((3, 2))))
    tape.backward(loss)
    once = w.grad.copy()
    tape.backward(loss)
    assert np.array_equal(w.grad, 2.0 * once)


def test_gradients_accumulate_across_tapes_until_zeroed():
    w = Tensor(np.ones((2, 2)))
    for _ in range(2):
        tape = Tape()
        with tape:
            loss = sum_all(w)
        tape.backward(loss)
    assert np.array_equal(w.grad, 2 * np.ones((2, 2)))
    w.zero_grad()
    assert w.grad is None


def test_composed_graph_finite_difference():
    rng = np.random.default_rng(12)
    params = {
        "w1": Tensor(rng.normal(size=(5, 4)) * 0.5),
        "b1": Tensor(rng.normal(size=(1, 4)) * 0.1),
        "w2": Tensor(rng.normal(size=(4, 3)) * 0.5),
        "gain": Tensor(np.ones((1, 3))),
        "bias": Tensor(np.zeros((1, 3))),
    }
    x = rng.normal(size=(6, 5))
    target = rng.normal(size=(1, 3))

    def loss_fn():
        h = relu(add_bias(matmul(Tensor(x), params["w1"]), params["b1"]))
        h = matmul(h, params["w2"])
        h = layer_norm(h, params["gain"], params["bias"])
        h = softmax_rows(h)
        pooled = mean_rows(mul(h, h))
        return mse(add(pooled, sub(pooled, pooled)), Tensor(target))

    assert finite_difference_check(loss_fn, params) <= 1e-4


def test_sigmoid_matches_closed_form_and_is_stable():
    x = np.array([[-800.0, -1.0, 0.0, 1.0, 800.0]])
    y = sigmoid(Tensor(x)).data
    assert np.all(np.isfinite(y))
    assert abs(y[0, 2] - 0.5) < 1e-15
    assert abs(y[0, 1] - 1 / (1 + math.e)) < 1e-12
    assert y[0, 0] == 0.0 and y[0, 4] == 1.0


# --- checkpoint container ---------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    params = {
        "layer.weight": Tensor(rng.normal(size=(3, 7))),
        "layer.bias": Tensor(rng.normal(size=(1, 7))),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(params)
    for name, t in params.items():
        assert np.array_equal(loaded[name], t.data)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(path)
