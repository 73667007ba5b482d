import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from boardembed.errors import EmptyGraphError, NumericError, ShapeError
from boardembed.linalg import (
    GradStore,
    LinearParams,
    finite_difference_gradcheck,
    init_linear,
    linear_apply,
    linear_backward,
    mean_pool,
    mean_pool_backward,
    relu,
    relu_backward,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_linear_identity_and_zero_input():
    p = LinearParams(np.eye(2), np.zeros(2))
    assert np.array_equal(linear_apply(np.array([1.0, 2.0]), p), [1.0, 2.0])
    q = LinearParams(np.random.default_rng(0).normal(size=(2, 2)), np.array([3.0, 4.0]))
    assert np.array_equal(linear_apply(np.zeros(2), q), [3.0, 4.0])


def test_linear_shape_errors():
    p = LinearParams(np.eye(2), np.zeros(2))
    with pytest.raises(ShapeError):
        linear_apply(np.ones(3), p)
    with pytest.raises(ShapeError):
        LinearParams(np.eye(2), np.zeros(3))


def test_linear_weight_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    p = init_linear(8, 8, rng)
    p.bias[:] = rng.normal(size=8)
    x = rng.normal(size=8)
    upstream = rng.normal(size=8)

    def loss(params):
        return float(upstream @ linear_apply(x, params["fc"]))

    dx, dw, db = linear_backward(x, p, upstream)
    err = finite_difference_gradcheck(loss, {"fc": p}, {"fc": LinearParams(dw, db)}, 1e-4)
    assert err < 1e-3
    assert np.allclose(dx, p.weight.T @ upstream)
    assert np.allclose(dw, np.outer(upstream, x))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite),
       finite, finite)
def test_linear_is_linear_without_bias(x, y, a, b):
    w = np.random.default_rng(1).normal(size=(4, 5))
    p = LinearParams(w, np.zeros(4))
    lhs = linear_apply(a * x + b * y, p)
    rhs = a * linear_apply(x, p) + b * linear_apply(y, p)
    assert np.allclose(lhs, rhs, atol=1e-6 * (1 + np.abs(rhs).max()))


def test_relu_forward_and_gradient():
    assert np.array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    assert np.array_equal(relu(-np.ones(4)), np.zeros(4))
    x = np.array([-1.0, 3.0])
    assert np.array_equal(relu_backward(x, np.ones(2)), [0.0, 1.0])
    assert relu_backward(np.array([0.0]), np.ones(1))[0] == 0.0


def test_mean_pool_examples():
    assert np.array_equal(mean_pool([[1.0, 3.0]]), [1.0, 3.0])
    assert np.array_equal(mean_pool([[0.0, 2.0], [2.0, 0.0]]), [1.0, 1.0])
    v = np.array([0.3, -1.7, 2.2])
    assert np.allclose(mean_pool([v] * 5), v)
    with pytest.raises(EmptyGraphError):
        mean_pool([])
    assert np.allclose(mean_pool_backward(4, np.ones(3)), 0.25)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8).flatmap(lambda n: st.tuples(
    arrays(np.float64, (n, 3), elements=st.integers(-100, 100).map(float)),
    st.permutations(list(range(n))))))
def test_mean_pool_permutation_invariant(case):
    xs, perm = case
    # integer-valued entries keep the sums exact in any order
    assert np.array_equal(mean_pool(xs), mean_pool(xs[list(perm)]))


def test_gradcheck_quadratic_and_constant():
    p = {"w": LinearParams(np.array([[3.0]]), np.array([0.0]))}

    def quad(params):
        return 0.5 * params["w"].weight[0, 0] ** 2

    analytic = {"w": LinearParams(np.array([[3.0]]), np.array([0.0]))}
    assert finite_difference_gradcheck(quad, p, analytic, 1e-4) < 1e-6

    def const(params):
        return 7.0

    zero = {"w": LinearParams(np.zeros((1, 1)), np.zeros(1))}
    assert finite_difference_gradcheck(const, p, zero, 1e-4) == 0.0


def test_gradcheck_rejects_nonfinite_loss():
    p = {"w": LinearParams(np.ones((1, 1)), np.zeros(1))}
    with pytest.raises(NumericError):
        finite_difference_gradcheck(lambda _: float("nan"), p, p, 1e-4)


def test_gradstore_zero_and_accumulate():
    params = {"a": init_linear(3, 2, np.random.default_rng(0))}
    store = GradStore.like(params)
    store.add("a", np.ones((2, 3)), np.ones(2))
    store.add("a", np.ones((2, 3)), np.ones(2))
    assert np.all(store["a"].weight == 2.0)
    store.zero()
    assert np.all(store["a"].weight == 0.0) and store.count == 0
    with pytest.raises(ShapeError):
        store.add("a", np.ones((3, 3)), np.ones(2))


def test_init_is_seeded_fan_in_uniform():
    a = init_linear(16, 4, np.random.default_rng(5))
    b = init_linear(16, 4, np.random.default_rng(5))
    assert np.array_equal(a.weight, b.weight)
    assert np.all(np.abs(a.weight) <= 0.25) and np.all(a.bias == 0)
