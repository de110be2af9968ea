import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eegmtl.tensor import (
    Parameter,
    Tensor,
    _toposort,
    backward,
    concat,
    expand,
    getitem,
    matmul,
    mean,
    no_grad,
    reshape,
    square,
    transpose,
    tsum,
)
from oracles import finite_diff


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def test_add_mul_grads():
    a, b = leaf([1.0, 2.0]), leaf([3.0, -1.0])
    backward(tsum(a * b + a))
    np.testing.assert_array_equal(a.grad, [4.0, 0.0])
    np.testing.assert_array_equal(b.grad, [1.0, 2.0])


def test_scalar_broadcast_only():
    a = leaf([[1.0, 2.0]])
    y = a * 3.0 + 1.0
    np.testing.assert_array_equal(y.data, [[4.0, 7.0]])
    with pytest.raises(ValueError):
        a + leaf([[1.0], [2.0]])


def test_expand_sums_back():
    v = leaf([[1.0, 2.0, 3.0]])
    backward(tsum(expand(v, (4, 3))))
    np.testing.assert_array_equal(v.grad, [[4.0, 4.0, 4.0]])


def test_backward_twice_accumulates():
    a = leaf([1.0, -2.0])
    y = tsum(square(a))
    backward(y)
    backward(y)
    np.testing.assert_array_equal(a.grad, 2 * 2 * a.data)


def test_grad_reads_zero_before_backward():
    p = Parameter(np.ones((2, 3)))
    assert p.grad.shape == (2, 3)
    assert not p.grad.any()


def test_nonscalar_backward_rejected():
    with pytest.raises(ValueError, match="scalar"):
        backward(leaf([1.0, 2.0]) * 2.0)


def test_no_grad_records_nothing():
    a = leaf([1.0])
    with no_grad():
        y = a * 2.0
    assert not y.requires_grad and y.is_leaf


def test_axis_out_of_range():
    with pytest.raises(ValueError):
        tsum(leaf([[1.0]]), axis=2)


def test_shared_subexpression_visited_once():
    a = leaf([2.0])
    h = a * a
    y = tsum(h * h + h)
    order = _toposort(y)
    assert len({id(n) for n in order}) == len(order)
    backward(y)
    # y = a^4 + a^2 ; dy/da = 4a^3 + 2a
    np.testing.assert_allclose(a.grad, [4 * 8 + 4])


def test_deep_chain_no_recursion_limit():
    a = leaf([1.0])
    y = a
    for _ in range(5000):
        y = y * 1.0
    backward(tsum(y))
    assert a.grad[0] == 1.0


def test_matmul_batched_and_shared_weight():
    rng = np.random.default_rng(0)
    x = leaf(rng.normal(size=(2, 3, 4)))
    w = leaf(rng.normal(size=(4, 5)))
    probe = rng.normal(size=(2, 3, 5))

    def f():
        return float(np.sum((x.data @ w.data) * probe))

    backward(tsum(matmul(x, w) * Tensor(probe)))
    np.testing.assert_allclose(w.grad, finite_diff(f, w.data), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(x.grad, finite_diff(f, x.data), rtol=1e-6, atol=1e-8)


def test_getitem_fancy_index_accumulates():
    a = leaf([1.0, 2.0, 3.0])
    backward(tsum(getitem(a, np.array([0, 0, 2]))))
    np.testing.assert_array_equal(a.grad, [2.0, 0.0, 1.0])


def test_concat_reshape_transpose_roundtrip():
    a, b = leaf(np.arange(6.0).reshape(2, 3)), leaf(np.arange(4.0).reshape(2, 2))
    c = transpose(reshape(concat([a, b], axis=1), (5, 2)), (1, 0))
    backward(tsum(c * Tensor(np.arange(10.0).reshape(2, 5))))
    full = np.arange(10.0).reshape(2, 5).T.reshape(2, 5)
    np.testing.assert_array_equal(a.grad, full[:, :3])
    np.testing.assert_array_equal(b.grad, full[:, 3:])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-3, 3, allow_nan=False)))
def test_mean_gradient_is_uniform(x):
    t = leaf(x)
    backward(mean(t))
    np.testing.assert_allclose(t.grad, np.full(x.shape, 1.0 / x.size))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-3, 3, allow_nan=False)),
       arrays(np.float64, st.integers(1, 6), elements=st.floats(-3, 3, allow_nan=False)))
def test_sum_rule_linear(x, y):
    """grad of f+g equals grad f + grad g."""
    n = min(len(x), len(y))
    a = leaf(x[:n])
    backward(tsum(square(a)) + tsum(a * Tensor(y[:n])))
    np.testing.assert_allclose(a.grad, 2 * x[:n] + y[:n])
