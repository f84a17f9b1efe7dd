import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stum import tensor as T
from stum.errors import AxisOutOfRange, NonFiniteInput, NotScalarLoss, ShapeMismatch
from stum.tensor import Tensor, finite_diff_check


def brute_matmul(a, b):
    p, q = a.shape
    r = b.shape[1]
    out = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            for k in range(q):
                out[i, j] += a[i, k] * b[k, j]
    return out


def grad_of(fn, *tensors):
    for t in tensors:
        t.grad = None
    T.backward(fn())
    return [t.grad for t in tensors]


# matmul


def test_matmul_identity():
    m = np.array([[1.5, -2.0], [0.25, 7.0]])
    assert np.array_equal(T.matmul(np.eye(2), m).data, m)


def test_matmul_hand_example():
    out = T.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0], [6.0]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeMismatch):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
    assert np.max(np.abs(T.matmul(a, b).data - brute_matmul(a, b))) < 1e-12


def test_matmul_batched_matches_per_slice():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((3, 2, 4, 5)), rng.standard_normal((5, 6))
    out = T.matmul(a, b).data
    for i in range(3):
        for j in range(2):
            assert np.allclose(out[i, j], brute_matmul(a[i, j], b), atol=1e-12)


def test_matmul_gradient_rules():
    rng = np.random.default_rng(5)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    g = rng.standard_normal((3, 2))
    ga, gb = grad_of(lambda: T.sum(T.mul(T.matmul(a, b), g)), a, b)
    assert np.allclose(ga, g @ b.data.T, atol=1e-12)
    assert np.allclose(gb, a.data.T @ g, atol=1e-12)


# elementwise


def test_elementwise_examples():
    a = np.array([1.0, 2.0])
    assert np.array_equal(T.elementwise("hadamard", a, np.ones(2)).data, a)
    assert T.elementwise("add", a, np.array([3.0, 4.0])).data.tolist() == [4.0, 6.0]
    assert T.elementwise("scale", np.array([2.0, 4.0]), 0.5).data.tolist() == [1.0, 2.0]
    assert T.elementwise("sub", a, a).data.tolist() == [0.0, 0.0]


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        T.add(np.ones(3), np.ones(4))


def test_scalar_operand_keeps_float32():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert T.mul(x, 0.5).dtype == np.float32
    assert T.sub(1.0, x).dtype == np.float32


# activations


def test_activation_examples():
    assert T.activation("relu", np.array([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert T.activation("sigmoid", np.array([0.0])).data.tolist() == [0.5]
    assert T.activation("softmax", np.array([0.0, 0.0]), axis=0).data.tolist() == [0.5, 0.5]


def test_softmax_needs_axis():
    with pytest.raises(ValueError):
        T.activation("softmax", np.zeros(2))


def test_nonfinite_input_rejected():
    with pytest.raises(NonFiniteInput):
        T.relu(np.array([1.0, np.nan]))


def test_sigmoid_saturates_exactly_at_infinity():
    assert T.sigmoid(np.array([-np.inf, np.inf])).data.tolist() == [0.0, 1.0]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_is_a_distribution(x):
    p = T.softmax(x, axis=1).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-10)


# rms_norm


def test_rms_norm_hand_example():
    out = T.rms_norm(np.array([3.0, 4.0]), np.ones(2), eps=0.0).data
    assert np.allclose(out, [3 / math.sqrt(12.5), 4 / math.sqrt(12.5)], atol=1e-12)
    assert np.allclose(out, [0.8485, 1.1314], atol=1e-4)


@pytest.mark.parametrize("c", [-3.0, 0.2, 7.0])
def test_rms_norm_constant_vector(c):
    out = T.rms_norm(np.full(5, c), np.ones(5), eps=1e-15).data
    assert np.allclose(out, np.sign(c), atol=1e-9)


def test_rms_norm_zero_weight():
    assert np.array_equal(T.rms_norm(np.arange(4.0), np.zeros(4), 1e-6).data, np.zeros(4))


def test_rms_norm_literal_variant_has_no_square_root():
    out = T.rms_norm(np.array([3.0, 4.0]), np.ones(2), eps=0.0, variant="paper_eq9").data
    assert np.allclose(out, [3 / 12.5, 4 / 12.5], atol=1e-15)


def test_rms_norm_weight_shape_checked():
    with pytest.raises(ShapeMismatch):
        T.rms_norm(np.ones((2, 3)), np.ones(2))


# reductions


def test_reduce_examples():
    assert T.reduce("sum", np.array([1.0, 2.0, 3.0])).item() == 6.0
    assert T.reduce("mean", np.zeros(4)).item() == 0.0
    assert T.reduce("abs_mean", np.array([-2.0, 2.0])).item() == 2.0


def test_reduce_bad_axis():
    with pytest.raises(AxisOutOfRange):
        T.sum(np.ones((2, 3)), axis=2)


# backward


def test_backward_sum_grad_is_ones():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    T.backward(T.sum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_frozen_weight_gets_no_grad_buffer():
    w = Tensor(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))  # frozen
    x = Tensor(np.array([0.5, -1.0]), requires_grad=True)
    T.backward(T.sum(T.matmul(w, x)))
    assert w.grad is None
    assert np.allclose(x.grad, w.data.T @ np.ones(3))


def test_relu_grad_example():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    T.backward(T.sum(T.relu(x)))
    assert x.grad.tolist() == [0.0, 1.0]
    assert finite_diff_check(lambda t: T.sum(T.relu(t)), x) < 1e-8


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NotScalarLoss):
        T.backward(T.mul(x, 2.0))


def test_gradients_accumulate_over_shared_use():
    x = Tensor(np.array([2.0]), requires_grad=True)
    T.backward(T.sum(T.add(T.mul(x, x), x)))  # d/dx (x^2 + x) = 2x + 1
    assert x.grad.tolist() == [5.0]


def test_tape_is_topological_and_visits_once():
    x = Tensor(np.ones(2), requires_grad=True)
    y = T.mul(x, 3.0)
    z = T.add(y, y)
    loss = T.sum(T.mul(z, y))
    order = T.tape(loss)
    assert len(order) == len({id(t) for t in order})
    position = {id(t): i for i, t in enumerate(order)}
    for t in order:
        for parent in t._parents:
            if id(parent) in position:
                assert position[id(parent)] < position[id(t)]


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad


# finite differences


def test_finite_diff_square():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    assert finite_diff_check(lambda t: T.sum(T.mul(t, t)), x, 1e-5) < 1e-6


def test_finite_diff_constant():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    assert finite_diff_check(lambda t: T.sum(Tensor(np.ones(3))), x) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_composite_gradient_random_points(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    nw = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)

    def f(_):
        h = T.rms_norm(T.matmul(a, w), nw, 1e-6)
        return T.mean(T.mul(T.sigmoid(h), T.softmax(h, axis=1)))

    assert finite_diff_check(f, a) < 1e-4
    assert finite_diff_check(f, w) < 1e-4
    assert finite_diff_check(f, nw) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 1000))
def test_unbroadcast_inverts_broadcast(rows, cols, seed):
    g = np.random.default_rng(seed).standard_normal((rows, cols))
    assert np.allclose(T.unbroadcast(g, (cols,)), g.sum(axis=0))
    assert np.allclose(T.unbroadcast(g, (rows, 1)), g.sum(axis=1, keepdims=True))
