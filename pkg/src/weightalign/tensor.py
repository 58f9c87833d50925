"""Dense array primitives shared by the rest of the package.

Tensors are plain ``numpy.ndarray`` objects in row-major (C) order.  All
activations use the ``(N, C, H, W)`` layout.  Precision is chosen once per
process with :func:`set_precision`; double is the default.

Variances are population variances (divisor = element count) everywhere.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_PRECISIONS = {"single": np.float32, "double": np.float64}
_dtype = np.float64


class ShapeError(ValueError):
    """Raised when array extents are incompatible with an operation."""


def set_precision(name):
    """Select ``"single"`` or ``"double"`` precision for newly created tensors."""
    global _dtype
    try:
        _dtype = _PRECISIONS[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}") from None


def get_dtype():
    return _dtype


def as_tensor(x):
    return np.asarray(x, dtype=_dtype)


def conv_output_size(size, kernel, stride, padding):
    """Output extent of a convolution or pooling window along one axis.

    Raises ShapeError when the window does not tile the padded input exactly.
    """
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")
    span = size + 2 * padding - kernel
    if span < 0:
        raise ShapeError(f"kernel {kernel} does not fit input extent {size} with padding {padding}")
    if span % stride:
        raise ShapeError(
            f"non-integer output extent: ({size} + 2*{padding} - {kernel}) / {stride} + 1"
        )
    return span // stride + 1


def im2col(x, kh, kw, stride=1, padding=0):
    """Extract sliding patches as rows.

    Returns an array of shape ``(N*OH*OW, C*kh*kw)``; each row is one patch
    flattened in (channel, row, col) order, matching ``w.reshape(Cout, -1)``.
    """
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, OH, OW, kh, kw) -> (N, OH, OW, C, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def col2im(cols, x_shape, kh, kw, stride=1, padding=0):
    """Adjoint of :func:`im2col`: scatter-add patch rows back into an image."""
    n, c, h, w = x_shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    d = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            img[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d[:, :, i, j]
    return img[:, :, padding:padding + h, padding:padding + w]


def conv2d_forward(x, weights, bias=None, stride=1, padding=0):
    """2-D cross-correlation ``out[n, o] = sum(w[o] * patch) + b[o]``.

    ``x`` is ``(N, C, H, W)``, ``weights`` is ``(Cout, C, kh, kw)``.
    """
    x = np.asarray(x)
    weights = np.asarray(weights)
    if x.ndim != 4 or weights.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weights, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but filters expect {weights.shape[1]}"
        )
    cout, _, kh, kw = weights.shape
    cols, oh, ow = im2col(x, kh, kw, stride, padding)
    out = cols @ weights.reshape(cout, -1).T
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} does not match {cout} filters")
        out = out + bias
    return out.reshape(x.shape[0], oh, ow, cout).transpose(0, 3, 1, 2).copy()


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    return a @ b


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = set()
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for {ndim}-D tensor")
        out.add(a % ndim)
    return tuple(sorted(out))


def reduce_stats(x, axes=None, keepdims=False):
    """Mean and population variance (divide by count) over ``axes``.

    ``axes=None`` reduces over every axis.  An empty axis set is an error.
    """
    x = np.asarray(x)
    axes = _normalize_axes(axes, x.ndim)
    if not axes:
        raise ShapeError("reduce_stats needs at least one axis")
    mean = x.mean(axis=axes, keepdims=True)
    var = np.square(x - mean).mean(axis=axes, keepdims=True)
    if not keepdims:
        mean = np.squeeze(mean, axis=axes)
        var = np.squeeze(var, axis=axes)
    return mean, var
