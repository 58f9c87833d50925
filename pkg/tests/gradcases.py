"""Randomized gradient-check cases shared by the unit and acceptance suites.

Each builder takes a seed and returns a list of ``(label, f, x)`` triples for
``finite_diff_check``.  Losses are random weighted sums so every output
coordinate contributes.  Inputs near ReLU kinks are redrawn, and every
normalization set holds at least 3 values: with 2 values the standardized
output is pinned to +-1 and the true gradient is only O(eps), far below
central-difference resolution.
"""

import numpy as np

from weightalign import autograd as ag
from weightalign import normalize as nz
from weightalign.layers import LayerSpec, ResidualBlock

KINK_MARGIN = 1e-3


def _weighted(out, r):
    return ag.sum_(out * ag.constant(r))


def _swap(obj, attr, fn):
    """``f(node)`` that evaluates ``fn`` with ``obj.attr`` temporarily replaced."""
    def f(node):
        saved = getattr(obj, attr)
        setattr(obj, attr, node)
        try:
            return fn()
        finally:
            setattr(obj, attr, saved)
    return f


def conv_case(seed):
    rng = np.random.default_rng(seed)
    while True:
        n, c, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        h = rng.integers(3, 7)
        k = int(rng.choice([1, 3]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        if (h + 2 * pad - k) % stride == 0:
            break
    x = rng.standard_normal((n, c, h, h))
    w = rng.standard_normal((cout, c, k, k))
    b = rng.standard_normal(cout)
    oh = (h + 2 * pad - k) // stride + 1
    r = rng.standard_normal((n, cout, oh, oh))
    return [
        ("conv/x", lambda xn: _weighted(ag.conv2d(xn, w, b, stride, pad), r), x),
        ("conv/w", lambda wn: _weighted(ag.conv2d(x, wn, b, stride, pad), r), w),
        ("conv/b", lambda bn: _weighted(ag.conv2d(x, w, bn, stride, pad), r), b),
    ]


def dense_case(seed):
    rng = np.random.default_rng(seed)
    n, fin, units = rng.integers(1, 5), rng.integers(1, 7), rng.integers(1, 6)
    x = rng.standard_normal((n, fin))
    w = rng.standard_normal((units, fin))
    r = rng.standard_normal((n, units))

    def f(xn, wn):
        return _weighted(ag.matmul(xn, ag.transpose(wn, (1, 0))), r)

    return [("dense/x", lambda xn: f(xn, w), x), ("dense/w", lambda wn: f(x, wn), w)]


def relu_case(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 5, size=rng.integers(1, 5)))
    x = rng.standard_normal(shape)
    x = np.sign(x) * (0.1 + np.abs(x))
    r = rng.standard_normal(shape)
    return [("relu", lambda xn: _weighted(ag.relu(xn), r), x)]


def _norm_input(rng, four_d=True):
    n = rng.integers(3, 6)
    c = rng.integers(1, 5)
    if not four_d:
        return rng.standard_normal((n, c)) * 2 + 1
    h = rng.integers(1, 4)
    return rng.standard_normal((n, c, h, h)) * 2 + 1


def bn_case(seed):
    rng = np.random.default_rng(seed)
    x = _norm_input(rng, four_d=bool(rng.integers(0, 2)))
    c = x.shape[1]
    gamma, beta = rng.standard_normal(c), rng.standard_normal(c)
    r = rng.standard_normal(x.shape)

    def f(xn, gn=gamma):
        return _weighted(nz.batch_norm(xn, gn, beta, nz.NormState.zeros(c), train=True), r)

    return [("bn/x", f, x), ("bn/gamma", lambda gn: f(x, gn), gamma)]


def _group_case(kind, seed):
    rng = np.random.default_rng(seed)
    while True:
        groups = int(rng.integers(1, 4))
        n, h = rng.integers(1, 4), rng.integers(1, 4)
        c = groups * int(rng.integers(1, 3)) if kind == "gn" else int(rng.integers(1, 5))
        per_set = {"gn": c // groups, "ln": c, "in": 1}[kind] * h * h
        if per_set >= 3:
            break
    x = rng.standard_normal((n, c, h, h)) * 2 + 1
    gamma, beta = rng.standard_normal(c), rng.standard_normal(c)
    r = rng.standard_normal(x.shape)

    def op(xn, gn):
        if kind == "gn":
            return nz.group_norm(xn, gn, beta, groups)
        if kind == "ln":
            return nz.layer_norm(xn, gn, beta)
        return nz.instance_norm(xn, gn, beta)

    return [(f"{kind}/x", lambda xn: _weighted(op(xn, gamma), r), x),
            (f"{kind}/gamma", lambda gn: _weighted(op(x, gn), r), gamma)]


def gn_case(seed):
    return _group_case("gn", seed)


def ln_case(seed):
    return _group_case("ln", seed)


def in_case(seed):
    return _group_case("in", seed)


def wa_case(seed):
    rng = np.random.default_rng(seed)
    cout, n = rng.integers(1, 5), rng.integers(2, 28)
    w = rng.standard_normal((cout, n)) * rng.uniform(0.1, 2)
    gamma = rng.uniform(0.5, 2, size=cout)
    mult = float(rng.choice([0.5, 1.0, 2.0]))
    r = rng.standard_normal((cout, n))
    return [
        ("wa/w", lambda wn: _weighted(nz.weight_align(wn, gamma, multiplier=mult), r), w),
        ("wa/gamma", lambda gn: _weighted(nz.weight_align(w, gn, multiplier=mult), r), gamma),
    ]


def wn_case(seed):
    rng = np.random.default_rng(seed)
    cout, n = rng.integers(1, 5), rng.integers(1, 28)
    w = rng.standard_normal((cout, n))
    g = rng.uniform(0.5, 2, size=cout)
    r = rng.standard_normal((cout, n))
    return [
        ("wn/w", lambda wn: _weighted(nz.weight_norm(wn, g), r), w),
        ("wn/g", lambda gn: _weighted(nz.weight_norm(w, gn), r), g),
    ]


def _preacts(block, x):
    with ag.no_grad():
        z1 = block.conv1.forward(ag.constant(x))
        z2 = block.conv2.forward(ag.relu(z1))
        skip = block.shortcut.forward(ag.constant(x)) if block.shortcut else ag.constant(x)
    return np.concatenate([z1.value.ravel(), (z2.value + skip.value).ravel()])


def residual_case(seed):
    rng = np.random.default_rng(seed)
    variant = ["none", "bn", "wa", "gn"][seed % 4]
    for attempt in range(100):
        c = int(rng.integers(1, 4))
        f = c if rng.integers(0, 2) else int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        h = int(rng.choice([3, 5])) if stride == 2 else int(rng.integers(2, 5))
        norm = {"kind": variant, "groups": 1} if variant in ("bn", "gn") else None
        reparam = {"kind": "wa"} if variant == "wa" else None
        spec = LayerSpec("residual_block", filters=f, kernel=3, stride=stride, norm=norm, reparam=reparam)
        block = ResidualBlock(spec, (c, h, h), seed * 1000 + attempt, (0,))
        x = rng.standard_normal((int(rng.integers(2, 4)), c, h, h))
        if np.abs(_preacts(block, x)).min() > KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not draw a kink-free residual block input")
    r = rng.standard_normal((x.shape[0], *block.out_shape))

    def fwd():
        return _weighted(block.forward(ag.constant(x)), r)

    return [
        (f"residual[{variant}]/x", lambda xn: _weighted(block.forward(xn), r), x),
        (f"residual[{variant}]/conv1.w", _swap(block.conv1, "weight", fwd), block.conv1.weight.value),
    ]


def cross_entropy_case(seed):
    rng = np.random.default_rng(seed)
    n, k = rng.integers(1, 6), rng.integers(2, 7)
    logits = rng.standard_normal((n, k)) * rng.uniform(0.5, 4)
    labels = rng.integers(0, k, size=n)
    return [("cross_entropy", lambda z: ag.cross_entropy(z, labels), logits)]


FAMILIES = {
    "conv": conv_case, "dense": dense_case, "relu": relu_case, "bn": bn_case,
    "gn": gn_case, "ln": ln_case, "in": in_case, "wa": wa_case, "wn": wn_case,
    "residual": residual_case, "cross_entropy": cross_entropy_case,
}


def worst_error(family, seeds):
    """Largest finite-difference relative error over all checks of ``seeds``."""
    worst, where = 0.0, None
    for s in seeds:
        for label, f, x in FAMILIES[family](s):
            err = ag.finite_diff_check(f, x)
            if err > worst:
                worst, where = err, f"{label} seed={s}"
    return worst, where
