"""Tape and op tests.

Forward values are compared against plain-numpy formulas computed
outside the tape; gradients against hand derivatives or finite
differences where the closed form is short.
"""

import numpy as np
import pytest
from scipy.special import erf

from tubeveil.engine import (
    NonFiniteError,
    ShapeError,
    TapeError,
    Tensor,
    backward,
    clip,
    concat,
    gelu,
    layer_norm,
    linear,
    log_softmax,
    masked_mean,
    masked_sum,
    reduce_mean,
    reduce_sum,
    reshape,
    set_finite_checks,
    sigmoid,
    slice_axis,
    softmax,
    softplus,
    stop_gradient,
    straight_through,
    transpose,
    zero_grads,
)

RNG = np.random.default_rng(99)


def _param(arr):
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=True)


def test_arithmetic_matches_numpy():
    a = RNG.normal(size=(3, 4)).astype(np.float32)
    b = RNG.normal(size=(3, 4)).astype(np.float32) + 2.0
    ta, tb = Tensor(a), Tensor(b)
    np.testing.assert_allclose((ta + tb).data, a + b, rtol=1e-6)
    np.testing.assert_allclose((ta - tb).data, a - b, rtol=1e-6)
    np.testing.assert_allclose((ta * tb).data, a * b, rtol=1e-6)
    np.testing.assert_allclose((ta / tb).data, a / b, rtol=1e-6)
    np.testing.assert_allclose((-ta).data, -a, rtol=1e-6)
    np.testing.assert_allclose((ta @ tb.data.T).data, a @ b.T, rtol=1e-5)


def test_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64


def test_broadcast_gradient_sums_over_expanded_axes():
    # d/db sum(a + b) with b shaped (1, 4) must sum the 3 broadcast rows
    a = _param(RNG.normal(size=(3, 4)))
    b = _param(RNG.normal(size=(1, 4)))
    backward(reduce_sum(a + b))
    np.testing.assert_allclose(b.grad, np.full((1, 4), 3.0), rtol=1e-6)
    np.testing.assert_allclose(a.grad, np.ones((3, 4)), rtol=1e-6)


def test_mul_gradient_is_other_operand():
    a = _param([[1.0, 2.0], [3.0, 4.0]])
    b = _param([[5.0, 6.0], [7.0, 8.0]])
    backward(reduce_sum(a * b))
    np.testing.assert_allclose(a.grad, b.data, rtol=1e-6)
    np.testing.assert_allclose(b.grad, a.data, rtol=1e-6)


def test_matmul_gradients():
    a = _param(RNG.normal(size=(2, 3)))
    b = _param(RNG.normal(size=(3, 4)))
    backward(reduce_sum(a @ b))
    ones = np.ones((2, 4), dtype=np.float32)
    np.testing.assert_allclose(a.grad, ones @ b.data.T, rtol=1e-5)
    np.testing.assert_allclose(b.grad, a.data.T @ ones, rtol=1e-5)


def test_linear_bias_broadcast_gradient():
    x = _param(RNG.normal(size=(5, 3)))
    w = _param(RNG.normal(size=(3, 2)))
    b = _param(np.zeros(2))
    backward(reduce_sum(linear(x, w, b)))
    np.testing.assert_allclose(b.grad, np.full(2, 5.0), rtol=1e-6)


def test_reductions_match_numpy():
    a = RNG.normal(size=(2, 3, 4)).astype(np.float32)
    t = Tensor(a)
    np.testing.assert_allclose(reduce_sum(t, axis=1).data, a.sum(axis=1), rtol=1e-5)
    np.testing.assert_allclose(reduce_mean(t, axis=(0, 2)).data, a.mean(axis=(0, 2)), rtol=1e-5)
    np.testing.assert_allclose(reduce_mean(t, axis=1, keepdims=True).data,
                               a.mean(axis=1, keepdims=True), rtol=1e-5)


def test_reduce_mean_gradient_is_uniform():
    a = _param(RNG.normal(size=(4, 6)))
    backward(reduce_mean(a))
    np.testing.assert_allclose(a.grad, np.full((4, 6), 1.0 / 24.0), rtol=1e-6)


def test_reshape_transpose_slice_concat_roundtrip():
    a = RNG.normal(size=(2, 3, 4)).astype(np.float32)
    t = Tensor(a)
    np.testing.assert_array_equal(reshape(t, (6, 4)).data, a.reshape(6, 4))
    np.testing.assert_array_equal(transpose(t, (2, 0, 1)).data, a.transpose(2, 0, 1))
    np.testing.assert_array_equal(slice_axis(t, 1, 1, 3).data, a[:, 1:3])
    np.testing.assert_array_equal(concat([t, t], axis=0).data, np.concatenate([a, a]))


def test_slice_gradient_scatters_back():
    a = _param(np.arange(12, dtype=np.float32).reshape(3, 4))
    backward(reduce_sum(slice_axis(a, 1, 1, 3)))
    expect = np.zeros((3, 4), dtype=np.float32)
    expect[:, 1:3] = 1.0
    np.testing.assert_array_equal(a.grad, expect)


def test_concat_gradient_splits():
    a = _param(RNG.normal(size=(2, 3)))
    b = _param(RNG.normal(size=(2, 2)))
    backward(reduce_sum(concat([a, b], axis=1) * 2.0))
    np.testing.assert_allclose(a.grad, np.full((2, 3), 2.0), rtol=1e-6)
    np.testing.assert_allclose(b.grad, np.full((2, 2), 2.0), rtol=1e-6)


def test_activations_match_reference_formulas():
    x = np.linspace(-4, 4, 33).astype(np.float32)
    t = Tensor(x)
    np.testing.assert_allclose(gelu(t).data, x * 0.5 * (1 + erf(x / np.sqrt(2))),
                               rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(sigmoid(t).data, 1 / (1 + np.exp(-x.astype(np.float64))),
                               rtol=1e-5)
    np.testing.assert_allclose(softplus(t).data, np.log1p(np.exp(x.astype(np.float64))),
                               rtol=1e-5)


def test_softplus_sigmoid_overflow_safe():
    x = Tensor(np.array([-200.0, 200.0], dtype=np.float32))
    sp = softplus(x).data
    assert np.isfinite(sp).all()
    np.testing.assert_allclose(sp, [0.0, 200.0], atol=1e-5)
    sg = sigmoid(x).data
    np.testing.assert_allclose(sg, [0.0, 1.0], atol=1e-7)


def test_softmax_rows_sum_one_and_shift_invariant():
    x = RNG.normal(size=(4, 7)).astype(np.float32)
    p = softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), np.ones(4), rtol=1e-6)
    p_shift = softmax(Tensor(x + 100.0)).data
    np.testing.assert_allclose(p, p_shift, rtol=1e-4, atol=1e-7)
    np.testing.assert_allclose(np.exp(log_softmax(Tensor(x)).data), p, rtol=1e-5)


def test_layer_norm_normalizes_rows():
    x = RNG.normal(size=(5, 8)).astype(np.float32) * 3 + 1
    g = Tensor(np.ones(8, dtype=np.float32))
    b = Tensor(np.zeros(8, dtype=np.float32))
    y = layer_norm(Tensor(x), g, b).data
    np.testing.assert_allclose(y.mean(axis=-1), np.zeros(5), atol=1e-6)
    np.testing.assert_allclose(y.std(axis=-1), np.ones(5), atol=1e-3)


def test_masked_mean_matches_manual():
    x = RNG.normal(size=(2, 5, 3)).astype(np.float32)
    m = np.array([[1, 0, 1, 1, 0], [1, 1, 1, 0, 0]], dtype=np.float32)[..., None]
    got = masked_mean(Tensor(x), Tensor(m), axis=1).data
    for i in range(2):
        keep = m[i, :, 0].astype(bool)
        np.testing.assert_allclose(got[i], x[i, keep].mean(axis=0), rtol=1e-5)


def test_masked_sum_matches_manual():
    x = RNG.normal(size=(3, 4)).astype(np.float32)
    m = np.array([[1, 1, 0, 0], [0, 1, 0, 1], [1, 1, 1, 1]], dtype=np.float32)
    got = masked_sum(Tensor(x), Tensor(m), axis=1).data
    np.testing.assert_allclose(got, (x * m).sum(axis=1), rtol=1e-5)


def test_masked_mean_rejects_soft_mask():
    x = Tensor(np.ones((1, 3)))
    with pytest.raises(ShapeError):
        masked_mean(x, Tensor(np.array([[0.5, 1.0, 0.0]])), axis=1)


def test_clip_gradient_zero_outside_range():
    a = _param(np.array([-2.0, 0.5, 2.0]))
    backward(reduce_sum(clip(a, 0.0, 1.0)))
    np.testing.assert_array_equal(a.grad, [0.0, 1.0, 0.0])


def test_straight_through_forward_hard_backward_soft():
    soft = _param(np.array([[0.6, 0.4]]))
    hard = np.array([[1.0, 0.0]], dtype=np.float32)
    st = straight_through(soft, hard)
    np.testing.assert_array_equal(st.data, hard)
    backward(reduce_sum(st * Tensor(np.array([[3.0, 7.0]], dtype=np.float32))))
    np.testing.assert_allclose(soft.grad, [[3.0, 7.0]], rtol=1e-6)


def test_straight_through_shape_mismatch():
    with pytest.raises(ShapeError):
        straight_through(_param(np.ones((2, 2))), np.ones((2, 3), dtype=np.float32))


def test_stop_gradient_blocks():
    a = _param(np.array([1.0, 2.0]))
    loss = reduce_sum(stop_gradient(a) * a)
    backward(loss)
    # only the live branch contributes: d/da (const * a) = const = a.data
    np.testing.assert_allclose(a.grad, a.data, rtol=1e-6)


def test_backward_requires_scalar_and_single_use():
    a = _param(np.ones((2, 2)))
    with pytest.raises(TapeError):
        backward(a + a)
    loss = reduce_sum(a * a)
    backward(loss)
    with pytest.raises(TapeError):
        backward(loss)


def test_backward_param_map_covers_off_tape_entries():
    a = _param(np.ones(3))
    b = _param(np.ones(3))
    grads = backward(reduce_sum(a * 2.0), {"a": a, "b": b})
    np.testing.assert_allclose(grads["a"].data, np.full(3, 2.0), rtol=1e-6)
    np.testing.assert_array_equal(grads["b"].data, np.zeros(3))


def test_grad_accumulates_until_zeroed():
    a = _param(np.ones(2))
    backward(reduce_sum(a))
    backward(reduce_sum(a))
    np.testing.assert_array_equal(a.grad, [2.0, 2.0])
    zero_grads([a])
    assert a.grad is None


def test_nonfinite_tensor_rejected():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0, np.inf]))
    prev = set_finite_checks(False)
    try:
        t = Tensor(np.array([1.0, np.inf]))
        assert not np.isfinite(t.data).all()
    finally:
        set_finite_checks(prev)
