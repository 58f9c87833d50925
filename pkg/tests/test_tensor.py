import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal import correlate

from weightalign import tensor as T
from weightalign.tensor import ShapeError


def reference_conv(x, w, b, stride, padding):
    """Direct cross-correlation via scipy, one (sample, filter) pair at a time."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = []
    for xi in xp:
        maps = [correlate(xi, wo, mode="valid")[0][::stride, ::stride] for wo in w]
        out.append(maps)
    out = np.array(out)
    return out if b is None else out + b[None, :, None, None]


def test_conv_output_size():
    assert T.conv_output_size(28, 3, 1, 1) == 28
    assert T.conv_output_size(7, 3, 2, 0) == 3
    with pytest.raises(ShapeError, match="non-integer"):
        T.conv_output_size(6, 3, 2, 0)
    with pytest.raises(ShapeError):
        T.conv_output_size(2, 5, 1, 0)
    with pytest.raises(ShapeError):
        T.conv_output_size(5, 3, 0, 0)


def test_conv_matches_scipy(rng):
    x = rng.standard_normal((2, 3, 7, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    for stride, pad in ((1, 0), (1, 1), (2, 0), (2, 1)):
        got = T.conv2d_forward(x, w, b, stride, pad)
        np.testing.assert_allclose(got, reference_conv(x, w, b, stride, pad), atol=1e-12)


def test_one_by_one_conv_is_channel_matmul(rng):
    x = rng.standard_normal((2, 5, 4, 4))
    w = rng.standard_normal((3, 5, 1, 1))
    expected = np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x)
    np.testing.assert_allclose(T.conv2d_forward(x, w), expected, atol=1e-12)


def test_conv_shape_errors(rng):
    with pytest.raises(ShapeError, match="channels"):
        T.conv2d_forward(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        T.conv2d_forward(rng.standard_normal((2, 5, 5)), rng.standard_normal((1, 2, 3, 3)))


@settings(max_examples=40, deadline=None)
@given(c=st.integers(1, 3), h=st.integers(3, 7), k=st.sampled_from([1, 3]),
       stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 2**31))
def test_col2im_is_adjoint_of_im2col(c, h, k, stride, pad, seed):
    if (h + 2 * pad - k) % stride:
        return
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, c, h, h))
    cols, _, _ = T.im2col(x, k, k, stride, pad)
    y = rng.standard_normal(cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * T.col2im(y, x.shape, k, k, stride, pad))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_conv_is_bilinear(seed, a, b):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.standard_normal((2, 1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    lhs = T.conv2d_forward(a * x1 + b * x2, w)
    rhs = a * T.conv2d_forward(x1, w) + b * T.conv2d_forward(x2, w)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_matmul_and_reduce_stats(rng):
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    x = rng.standard_normal((4, 3, 5))
    mean, var = T.reduce_stats(x, (0, 2))
    np.testing.assert_allclose(mean, x.mean(axis=(0, 2)))
    np.testing.assert_allclose(var, x.var(axis=(0, 2), ddof=0))
    with pytest.raises(ShapeError):
        T.reduce_stats(x, ())


def test_precision_switch():
    T.set_precision("single")
    assert T.as_tensor([1.0]).dtype == np.float32
    T.set_precision("double")
    assert T.get_dtype() == np.float64
    with pytest.raises(ValueError):
        T.set_precision("half")
