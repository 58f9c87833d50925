"""Reverse-mode automatic differentiation over a dynamically recorded graph.

Every differentiable operation returns a :class:`Node` holding its output
value, its parents, and a rule mapping the output gradient to parent
gradients.  Node ids come from a global counter, so parents always carry a
smaller id than their children and reverse recording order is a valid
topological order for :func:`backward`.
"""

import contextlib
import itertools

import numpy as np

from . import tensor as T
from .tensor import ShapeError

_ids = itertools.count()
_grad_enabled = True


class Node:
    __slots__ = ("value", "parents", "backward_fn", "op", "id", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", requires_grad=False):
        self.value = value if isinstance(value, np.ndarray) else T.as_tensor(value)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, id={self.id})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def parameter(value):
    """A trainable leaf."""
    return Node(T.as_tensor(value).copy(), requires_grad=True)


def constant(value):
    return value if isinstance(value, Node) else Node(T.as_tensor(value))


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording parents (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _record(value, parents, backward_fn, op):
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Node(value, op=op)
    return Node(value, parents, backward_fn, op, requires_grad=True)


class GradientMap(dict):
    """Gradients keyed by node id; a :class:`Node` may be used as the key."""

    def __getitem__(self, key):
        return super().__getitem__(key.id if isinstance(key, Node) else key)

    def __setitem__(self, key, value):
        super().__setitem__(key.id if isinstance(key, Node) else key, value)

    def __contains__(self, key):
        return super().__contains__(key.id if isinstance(key, Node) else key)

    def get(self, key, default=None):
        return super().get(key.id if isinstance(key, Node) else key, default)


def backward(loss):
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a :class:`GradientMap` with an entry for every recorded node that
    the loss depends on.  Gradients from multiple consumers are summed.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = GradientMap()
    if not loss.requires_grad:
        return grads
    order = []
    seen = {loss.id}
    stack = [loss]
    while stack:
        node = stack.pop()
        order.append(node)
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                seen.add(p.id)
                stack.append(p)
    order.sort(key=lambda n: n.id, reverse=True)

    grads[loss.id] = np.ones_like(loss.value)
    for node in order:
        g = dict.get(grads, node.id)
        if g is None or node.backward_fn is None:
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = dict.get(grads, p.id)
            grads[p.id] = pg if prev is None else prev + pg
    return grads


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = constant(a), constant(b)
    return _record(
        a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b):
    a, b = constant(a), constant(b)
    return _record(
        a.value - b.value, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b):
    a, b = constant(a), constant(b)
    return _record(
        a.value * b.value, (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
        "mul",
    )


def div(a, b):
    a, b = constant(a), constant(b)
    out = a.value / b.value

    def rule(g):
        ga = g / b.value
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _record(out, (a, b), rule, "div")


def neg(a):
    a = constant(a)
    return _record(-a.value, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    a = constant(a)
    p = float(exponent)
    return _record(
        a.value ** p, (a,), lambda g: (g * p * a.value ** (p - 1),), "pow",
    )


def sqrt(a):
    a = constant(a)
    out = np.sqrt(a.value)
    return _record(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def exp(a):
    a = constant(a)
    out = np.exp(a.value)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = constant(a)
    return _record(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def relu(a):
    """max(a, 0); the subgradient at exactly 0 is 0."""
    a = constant(a)
    mask = a.value > 0
    return _record(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def standardize(x, axes, eps):
    """``(x - mean) / sqrt(var + eps)`` over ``axes`` as one fused primitive.

    Returns ``(x_hat, mean, var)``; ``mean``/``var`` are plain arrays with the
    reduced axes kept.
    """
    x = constant(x)
    axes = T._normalize_axes(axes, x.ndim)
    mu, var = T.reduce_stats(x.value, axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv

    def rule(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _record(xhat, (x,), rule, "standardize"), mu, var


# -- reductions and shape ----------------------------------------------------

def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    return T._normalize_axes(axis, ndim)


def sum_(a, axis=None, keepdims=False):
    a = constant(a)
    axes = _axes(axis, a.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), rule, "sum")


def mean(a, axis=None, keepdims=False):
    a = constant(a)
    axes = _axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    out = a.value.mean(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record(out, (a,), rule, "mean")


def reshape(a, shape):
    a = constant(a)
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes):
    a = constant(a)
    inv = np.argsort(axes)
    return _record(
        a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose",
    )


def flatten(a):
    return reshape(a, (a.shape[0], -1))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    a, b = constant(a), constant(b)
    out = T.matmul(a.value, b.value)
    return _record(
        out, (a, b), lambda g: (g @ b.value.T, a.value.T @ g), "matmul",
    )


def conv2d(x, w, bias=None, stride=1, padding=0):
    """Differentiable 2-D convolution via explicit patch extraction."""
    x, w = constant(x), constant(w)
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weights, got {xv.shape} and {wv.shape}")
    if xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"input has {xv.shape[1]} channels but filters expect {wv.shape[1]}")
    n = xv.shape[0]
    cout, _, kh, kw = wv.shape
    cols, oh, ow = T.im2col(xv, kh, kw, stride, padding)
    wmat = wv.reshape(cout, -1)
    out = cols @ wmat.T
    parents = (x, w)
    if bias is not None:
        bias = constant(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} does not match {cout} filters")
        out = out + bias.value
        parents = (x, w, bias)
    out = out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)

    def rule(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(wv.shape) if w.requires_grad else None
        gx = T.col2im(g2 @ wmat, xv.shape, kh, kw, stride, padding) if x.requires_grad else None
        grads = (gx, gw)
        if bias is not None:
            grads += (g2.sum(axis=0),)
        return grads

    return _record(np.ascontiguousarray(out), parents, rule, "conv2d")


# -- pooling -----------------------------------------------------------------

def maxpool2d(x, pool):
    """Non-overlapping max pooling; ties route the gradient to the first max."""
    x = constant(x)
    n, c, h, w = x.shape
    if h % pool or w % pool:
        raise ShapeError(f"pool size {pool} does not tile spatial extent {h}x{w}")
    oh, ow = h // pool, w // pool
    win = (x.value.reshape(n, c, oh, pool, ow, pool)
           .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, pool * pool))
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def rule(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx, g[..., None], axis=-1)
        gx = (gwin.reshape(n, c, oh, ow, pool, pool)
              .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))
        return (gx,)

    return _record(out, (x,), rule, "maxpool2d")


def avgpool2d(x, pool=None):
    """Non-overlapping average pooling; ``pool=None`` averages globally to 1x1."""
    x = constant(x)
    n, c, h, w = x.shape
    if pool is None:
        return mean(x, axis=(2, 3), keepdims=True)
    if h % pool or w % pool:
        raise ShapeError(f"pool size {pool} does not tile spatial extent {h}x{w}")
    r = reshape(x, (n, c, h // pool, pool, w // pool, pool))
    return mean(r, axis=(3, 5))


# -- losses ------------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean softmax cross-entropy with log-sum-exp stabilization."""
    logits = constant(logits)
    z = logits.value
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, K) logits, got {z.shape}")
    labels = np.asarray(labels)
    n, k = z.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def rule(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _record(np.asarray(loss, dtype=z.dtype), (logits,), rule, "cross_entropy")


# -- gradient checking -------------------------------------------------------

def finite_diff_check(f, x, h=1e-5):
    """Compare reverse-mode and central-difference gradients of ``f`` at ``x``.

    ``f`` maps a Node to a scalar Node.  Returns the maximum over coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    x0 = np.array(x, dtype=T.get_dtype())
    xn = parameter(x0)
    out = f(xn)
    analytic = backward(out).get(xn)
    analytic = np.zeros_like(x0) if analytic is None else analytic
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(constant(x0)).value)
            flat[i] = orig - h
            fm = float(f(constant(x0)).value)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite function value at coordinate {i}")
            nflat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
