import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weightalign import autograd as ag
from weightalign.tensor import ShapeError

import gradcases


@pytest.mark.parametrize("family", sorted(gradcases.FAMILIES))
def test_gradients_match_finite_differences(family):
    worst, where = gradcases.worst_error(family, range(5))
    assert worst < 1e-4, where


def test_shared_subexpression_accumulates():
    x = ag.parameter([3.0])
    y = x * x + x
    g = ag.backward(ag.sum_(y))
    assert g[x][0] == 7.0


def test_backward_requires_scalar():
    x = ag.parameter(np.ones(3))
    with pytest.raises(ShapeError):
        ag.backward(x * 2)


def test_constants_get_no_gradient():
    x = ag.parameter([1.0, 2.0])
    c = ag.constant([5.0, 6.0])
    g = ag.backward(ag.sum_(x * c))
    np.testing.assert_array_equal(g[x], [5.0, 6.0])
    assert c not in g


def test_no_grad_records_nothing():
    x = ag.parameter([1.0])
    with ag.no_grad():
        y = x * 3
    assert not y.requires_grad and y.parents == ()


def test_broadcast_gradient_is_summed():
    x = ag.parameter(np.ones((3, 4)))
    b = ag.parameter(np.zeros(4))
    g = ag.backward(ag.sum_(x + b))
    np.testing.assert_array_equal(g[b], np.full(4, 3.0))


def test_relu_subgradient_at_zero_is_zero():
    x = ag.parameter([-1.0, 0.0, 2.0])
    g = ag.backward(ag.sum_(ag.relu(x)))
    np.testing.assert_array_equal(g[x], [0.0, 0.0, 1.0])


def test_cross_entropy_values():
    z = np.zeros((2, 4))
    assert float(ag.cross_entropy(z, np.array([0, 3])).value) == pytest.approx(np.log(4))
    with pytest.raises(ValueError):
        ag.cross_entropy(z, np.array([0, 4]))
    big = np.array([[1000.0, 0.0]])
    assert float(ag.cross_entropy(big, np.array([0])).value) == pytest.approx(0.0)


def test_maxpool_routes_to_first_max():
    x = ag.parameter(np.ones((1, 1, 2, 2)))
    g = ag.backward(ag.sum_(ag.maxpool2d(x, 2)))
    np.testing.assert_array_equal(g[x][0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_avgpool_global_shape():
    x = ag.constant(np.arange(16.0).reshape(1, 1, 4, 4))
    out = ag.avgpool2d(x)
    assert out.shape == (1, 1, 1, 1) and out.value.item() == 7.5


def test_finite_diff_check_raises_on_nonfinite():
    with np.errstate(all="ignore"), pytest.raises(FloatingPointError):
        ag.finite_diff_check(lambda x: ag.sum_(ag.log(x)), np.array([0.0, 1.0]))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_maxpool_gradient_off_ties(seed):
    rng = np.random.default_rng(seed)
    x = rng.permutation(32).reshape(1, 2, 4, 4).astype(float) / 7
    r = rng.standard_normal((1, 2, 2, 2))
    err = ag.finite_diff_check(lambda xn: ag.sum_(ag.maxpool2d(xn, 2) * ag.constant(r)), x)
    assert err < 1e-6
