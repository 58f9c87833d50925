"""Kaiming-style weight initialization with reproducible per-layer streams."""

import numpy as np

from .tensor import get_dtype

SCHEMES = ("kaiming_wa",)


def kaiming_std(n):
    """Target standard deviation ``sqrt(2/n)`` for a filter with ``n`` inputs."""
    if n < 1:
        raise ValueError(f"fan-in n must be a positive integer, got {n}")
    return float(np.sqrt(2.0 / n))


def fan_in(shape):
    """``k*k*c`` for a conv bank ``(C_out, c, k, k)``, ``fan_in`` for ``(units, fan_in)``."""
    return int(np.prod(shape[1:]))


def layer_rng(seed, *path):
    """Generator for one parameter, keyed by its position in the network.

    Streams depend only on ``(seed, path)``, never on how many draws other
    layers made, so build order does not change any layer's values.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(p) for p in path)))


def kaiming_init(shape, n, rng):
    """I.i.d. zero-mean Gaussian samples with std ``sqrt(2/n)``.

    The same std is used for the first layer as for the rest.
    """
    std = kaiming_std(n)
    return (rng.standard_normal(shape) * std).astype(get_dtype(), copy=False)
