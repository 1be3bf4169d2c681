import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from scipy import special

from ftz import tensor as T
from ftz.tensor import (DimensionError, IGNORE_INDEX, TapeError, Tensor, backward, cross_entropy_logits, gelu,
                        gradcheck, layer_norm, no_grad, precision, reset_tape, softmax_lastdim)


def leaf(x, dtype=np.float64):
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=True)


def test_default_dtype_is_float32_and_precision_switches():
    assert Tensor([1.0]).data.dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_add_broadcast_gradient_sums_over_broadcast_axes():
    a = leaf(np.ones((2, 3)))
    b = leaf(np.arange(3.0))
    backward(T.tsum(a + b))
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])


def test_mul_gradient_matches_product_rule():
    x = leaf([1.5, -2.0, 3.0])
    y = leaf([0.5, 4.0, -1.0])
    backward(T.tsum(x * y))
    np.testing.assert_allclose(x.grad, y.data)
    np.testing.assert_allclose(y.grad, x.data)


def test_matmul_gradients_are_transposed_products():
    rng = np.random.default_rng(0)
    a = leaf(rng.normal(size=(3, 4)))
    b = leaf(rng.normal(size=(4, 2)))
    g = rng.normal(size=(3, 2))
    backward(T.tsum(T.mul(a @ b, Tensor(g, dtype=np.float64))))
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_matmul_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_add_incompatible_shapes_raise_dimension_error():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4,)))


def test_softmax_matches_scipy():
    x = np.random.default_rng(1).normal(size=(4, 7)) * 5
    with precision(np.float64):
        y = softmax_lastdim(Tensor(x)).data
    np.testing.assert_allclose(y, special.softmax(x, axis=-1), rtol=1e-12)


def test_softmax_is_shift_invariant_for_large_logits():
    x = np.array([[1000.0, 1001.0, 999.0]])
    with precision(np.float64):
        y = softmax_lastdim(Tensor(x)).data
    np.testing.assert_allclose(y, special.softmax(x - 1000.0, axis=-1))


def test_gelu_matches_scalar_erf_formula():
    xs = np.linspace(-6, 6, 101)
    with precision(np.float64):
        y = gelu(Tensor(xs)).data
    ref = np.array([0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))) for v in xs])
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-14)


def test_gelu_derivative_matches_closed_form():
    xs = np.linspace(-4, 4, 33)
    with precision(np.float64):
        x = leaf(xs)
        backward(T.tsum(gelu(x)))
    cdf = np.array([0.5 * (1 + math.erf(v / math.sqrt(2))) for v in xs])
    pdf = np.exp(-0.5 * xs**2) / math.sqrt(2 * math.pi)
    np.testing.assert_allclose(x.grad, cdf + xs * pdf, rtol=1e-10, atol=1e-14)


def test_layer_norm_matches_loop_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 5))
    gamma, beta = rng.normal(size=5), rng.normal(size=5)
    with precision(np.float64):
        y = layer_norm(Tensor(x), Tensor(gamma), Tensor(beta)).data
    for r in range(3):
        row = x[r]
        mu = sum(row) / 5
        var = sum((v - mu) ** 2 for v in row) / 5
        ref = [(v - mu) / math.sqrt(var + 1e-5) * g + b for v, g, b in zip(row, gamma, beta)]
        np.testing.assert_allclose(y[r], ref, rtol=1e-12)


def test_cross_entropy_matches_logsumexp_oracle():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(2, 4, 6))
    targets = np.array([[1, 5, IGNORE_INDEX, 0], [2, IGNORE_INDEX, 3, 3]])
    with precision(np.float64):
        loss = cross_entropy_logits(Tensor(logits), targets)
    keep = targets != IGNORE_INDEX
    nll = special.logsumexp(logits, axis=-1) - np.take_along_axis(logits, np.where(keep, targets, 0)[..., None], -1)[..., 0]
    assert loss.supervised == int(keep.sum())
    assert float(loss.data) == pytest.approx(nll[keep].mean(), rel=1e-12)


def test_cross_entropy_uniform_logits_give_log_vocab():
    loss = cross_entropy_logits(Tensor(np.zeros((3, 64))), np.array([0, 7, 63]))
    assert float(loss.data) == pytest.approx(math.log(64), abs=1e-6)


def test_cross_entropy_all_ignored_is_zero_with_no_supervision():
    loss = cross_entropy_logits(Tensor(np.ones((2, 5))), np.full(2, IGNORE_INDEX))
    assert float(loss.data) == 0.0 and loss.supervised == 0


def test_cross_entropy_out_of_range_target_raises():
    with pytest.raises(IndexError):
        cross_entropy_logits(Tensor(np.zeros((1, 4))), np.array([4]))


def test_embedding_out_of_range_raises():
    with pytest.raises(IndexError):
        T.embedding(Tensor(np.zeros((3, 2))), np.array([3]))


def test_embedding_gradient_accumulates_repeated_ids():
    w = leaf(np.zeros((4, 2)))
    backward(T.tsum(T.embedding(w, np.array([1, 1, 3]))))
    np.testing.assert_array_equal(w.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_backward_twice_on_same_loss_is_stale():
    x = leaf([1.0, 2.0])
    loss = T.tsum(x * x)
    backward(loss)
    with pytest.raises(TapeError):
        backward(loss)


def test_backward_after_reset_is_stale():
    x = leaf([1.0])
    loss = T.tsum(x * 2.0)
    reset_tape()
    with pytest.raises(TapeError):
        backward(loss)


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(TapeError):
        backward(x * 2.0)


def test_no_grad_records_nothing():
    reset_tape()
    x = leaf([1.0, 2.0])
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert len(T.get_tape()) == 0


def test_gradients_accumulate_across_uses():
    x = leaf([2.0])
    backward(T.tsum(x * x + x))
    np.testing.assert_allclose(x.grad, [5.0])


def test_gradcheck_requires_64_bit():
    with pytest.raises(TypeError):
        gradcheck(lambda a: T.tsum(a), [Tensor(np.ones(2, np.float32), requires_grad=True)])


def test_gradcheck_detects_a_wrong_backward():
    def bad_square(x):
        return T._make(x.data**2, (x,), lambda g: (g * x.data,))  # missing factor 2

    with precision(np.float64):
        err = gradcheck(lambda x: T.tsum(bad_square(x)), [leaf([1.0, 2.0])])
    assert err > 0.1


def test_check_finite_flags_nan():
    T.set_check_finite(True)
    try:
        with pytest.raises(FloatingPointError):
            Tensor([1.0]) * float("nan")
    finally:
        T.set_check_finite(False)


def test_getitem_fancy_gradient_scatters_with_repeats():
    x = leaf(np.arange(6.0).reshape(3, 2))
    backward(T.tsum(x[np.array([0, 0, 2])]))
    np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])


def test_concat_and_stack_shapes():
    a, b = Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3)))
    assert T.concat([a, b], axis=0).shape == (4, 3)
    assert T.stack([a, b], axis=1).shape == (2, 2, 3)
    with pytest.raises(DimensionError):
        T.concat([a, Tensor(np.zeros((2, 4)))], axis=0)


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=finite))
def test_softmax_rows_are_distributions(x):
    with precision(np.float64):
        y = softmax_lastdim(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(-1), 1.0, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 8)), elements=finite))
def test_layer_norm_output_is_standardized(x):
    d = x.shape[-1]
    with precision(np.float64):
        y = layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-9)
    var = x.var(-1)
    np.testing.assert_allclose(y.var(-1), var / (var + 1e-5), rtol=1e-7, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_matmul_gradcheck_random_shapes(m, k, n, seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        a, b = leaf(rng.normal(size=(m, k))), leaf(rng.normal(size=(k, n)))
        r = Tensor(rng.normal(size=(m, n)))
        assert gradcheck(lambda x, y: T.tsum(T.mul(x @ y, r)), [a, b]) <= 1e-6
