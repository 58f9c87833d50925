"""Activation normalizers (BN, GN, LN, IN) and weight reparameterizers (WA, WN).

Activation normalizers standardize activations with sample statistics and
then apply a per-channel affine ``gamma * x_hat + beta``.  Reparameterizers
never look at activations: they rewrite each output filter of a weight bank
inside the differentiated graph on every forward pass, so the raw weights stay
the trainable parameters.

WeightAlign maps a flattened filter ``w`` of length ``n`` to::

    w_hat = gamma * (w - mean(w)) / (multiplier * sqrt(n/2 * var(w) + eps))

which gives every filter zero mean and variance ``2/n`` (times ``gamma**2``).
There is deliberately no shift term: adding a constant to every weight of a
filter re-introduces an input-proportional term in the output.
"""

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autograd as ag
from .tensor import ShapeError, get_dtype

ACTIVATION_NORMS = ("none", "bn", "gn", "ln", "in")
REPARAMETERIZERS = ("none", "wa", "wn")

_sample_stat_calls = 0


def sample_stat_count():
    """Number of times activation statistics were computed from a batch."""
    return _sample_stat_calls


def reset_sample_stat_count():
    global _sample_stat_calls
    _sample_stat_calls = 0


def _count_sample_stats():
    global _sample_stat_calls
    _sample_stat_calls += 1


class ConfigError(ValueError):
    """Invalid normalizer / reparameterizer / network configuration."""


def _from_dict(cls, d, what):
    if d is None:
        return cls()
    if isinstance(d, str):
        return cls(kind=d)
    if isinstance(d, cls):
        return d
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {what} field(s): {sorted(unknown)}")
    return cls(**d)


@dataclass
class NormConfig:
    kind: str = "none"
    eps: float = 1e-5
    momentum: float = 0.1
    groups: int = 4

    def __post_init__(self):
        if self.kind not in ACTIVATION_NORMS:
            raise ConfigError(f"unknown normalizer {self.kind!r}; expected one of {ACTIVATION_NORMS}")
        if not self.eps > 0:
            raise ConfigError("normalizer eps must be > 0")
        if not 0 <= self.momentum <= 1:
            raise ConfigError("normalizer momentum must lie in [0, 1]")
        if self.groups < 1:
            raise ConfigError("group count must be >= 1")

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d, "normalizer")

    def to_dict(self):
        return asdict(self)


@dataclass
class ReparamConfig:
    """WeightAlign / WeightNorm settings.

    ``center`` and ``scale`` switch the two WeightAlign components
    (zero filter mean, filter variance 2/n).  ``multiplier`` scales the
    WeightAlign denominator and is only meant for scale ablations.
    """

    kind: str = "none"
    eps: float = 1e-5
    center: bool = True
    scale: bool = True
    multiplier: float = 1.0

    def __post_init__(self):
        if self.kind not in REPARAMETERIZERS:
            raise ConfigError(f"unknown reparameterizer {self.kind!r}; expected one of {REPARAMETERIZERS}")
        if not self.eps > 0:
            raise ConfigError("reparameterizer eps must be > 0")
        if not (np.isfinite(self.multiplier) and self.multiplier > 0):
            raise ConfigError("WeightAlign multiplier must be finite and > 0")

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, dict) and "beta" in d:
            raise ConfigError(
                "WeightAlign has no shift (beta) parameter: a constant added to a filter "
                "adds an input-proportional term and undoes the alignment"
            )
        return _from_dict(cls, d, "reparameterizer")

    def to_dict(self):
        return asdict(self)


# -- functional forms --------------------------------------------------------

def _channel_shape(x):
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


@dataclass
class NormState:
    """Running batch statistics (population variance) for inference."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def zeros(cls, channels, momentum=0.1, eps=1e-5):
        return cls(np.zeros(channels, get_dtype()), np.ones(channels, get_dtype()), momentum, eps)

    def update(self, batch_mean, batch_var):
        m = self.momentum
        self.running_mean = (1 - m) * self.running_mean + m * batch_mean
        self.running_var = (1 - m) * self.running_var + m * batch_var


def batch_norm(x, gamma, beta, state, train=True):
    """Per-channel standardization over (N, H, W) followed by ``gamma*x + beta``.

    In train mode batch statistics are used and ``state`` is updated by an
    exponential moving average; in eval mode the running statistics are used.
    """
    x = ag.constant(x)
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects (N, C) or (N, C, H, W), got {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    cshape = _channel_shape(x)
    if train:
        _count_sample_stats()
        xhat, mu, var = ag.standardize(x, axes, state.eps)
        state.update(mu.reshape(-1), var.reshape(-1))
    else:
        rm = state.running_mean.reshape(cshape)
        rs = np.sqrt(state.running_var.reshape(cshape) + state.eps)
        xhat = (x - rm) / rs
    return xhat * ag.reshape(gamma, cshape) + ag.reshape(beta, cshape)


def group_norm(x, gamma, beta, groups, eps=1e-5):
    """Per-sample standardization within channel groups, then per-channel affine."""
    x = ag.constant(x)
    if x.ndim not in (2, 4):
        raise ShapeError(f"group_norm expects (N, C) or (N, C, H, W), got {x.shape}")
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ShapeError(f"{c} channels cannot be split into {groups} groups")
    _count_sample_stats()
    xr = ag.reshape(x, (n, groups, -1))
    xhat = ag.reshape(ag.standardize(xr, 2, eps)[0], x.shape)
    cshape = _channel_shape(x)
    return xhat * ag.reshape(gamma, cshape) + ag.reshape(beta, cshape)


def layer_norm(x, gamma, beta, eps=1e-5):
    return group_norm(x, gamma, beta, 1, eps)


def instance_norm(x, gamma, beta, eps=1e-5):
    return group_norm(x, gamma, beta, ag.constant(x).shape[1], eps)


def weight_align(w, gamma=1.0, center=True, scale=True, eps=1e-5, multiplier=1.0):
    """Align each filter (last axis of ``w``) to zero mean and variance ``2/n``.

    ``gamma`` is a scalar or one value per filter.  With ``center=False`` the
    mean is not subtracted from the numerator; with ``scale=False`` the
    denominator is 1.  Population variance is used.
    """
    w = ag.constant(w)
    n = w.shape[-1]
    mu = ag.mean(w, -1, keepdims=True)
    d = w - mu
    out = d if center else w
    if scale:
        var = ag.mean(d * d, -1, keepdims=True)
        out = out / (ag.sqrt(var * (n / 2.0) + eps) * multiplier)
    gamma = ag.constant(gamma)
    if gamma.ndim:
        gamma = ag.reshape(gamma, gamma.shape + (1,))
    return out * gamma


def weight_norm(w, g=1.0, eps=1e-5):
    """``g * w / (||w|| + eps)`` per filter (last axis)."""
    w = ag.constant(w)
    norm = ag.sqrt(ag.sum_(w * w, -1, keepdims=True))
    g = ag.constant(g)
    if g.ndim:
        g = ag.reshape(g, g.shape + (1,))
    return w / (norm + eps) * g


def reparameterize_bank(weight, gamma, cfg):
    """Apply the configured reparameterizer independently to every output filter.

    ``weight`` is ``(C_out, C, k, k)`` or ``(units, fan_in)``; each filter is
    flattened to its ``n = k*k*C`` (or ``fan_in``) values.
    """
    if cfg.kind == "none":
        return ag.constant(weight)
    weight = ag.constant(weight)
    flat = ag.reshape(weight, (weight.shape[0], -1))
    if cfg.kind == "wa":
        out = weight_align(flat, gamma, cfg.center, cfg.scale, cfg.eps, cfg.multiplier)
    else:
        out = weight_norm(flat, gamma, cfg.eps)
    return ag.reshape(out, weight.shape)


# -- stateful wrappers used by layers ----------------------------------------

class Normalizer:
    """An activation normalizer with its learnable affine and running state."""

    def __init__(self, cfg, channels):
        self.cfg = cfg
        self.channels = channels
        if cfg.kind == "gn" and channels % cfg.groups:
            raise ConfigError(f"{channels} channels are not divisible by {cfg.groups} groups")
        self.gamma = ag.parameter(np.ones(channels))
        self.beta = ag.parameter(np.zeros(channels))
        self.state = NormState.zeros(channels, cfg.momentum, cfg.eps)

    def parameters(self):
        return [self.gamma, self.beta]

    def __call__(self, x, train=True):
        kind = self.cfg.kind
        if kind == "bn":
            return batch_norm(x, self.gamma, self.beta, self.state, train)
        if kind == "gn":
            groups = self.cfg.groups
        elif kind == "ln":
            groups = 1
        else:
            groups = self.channels
        return group_norm(x, self.gamma, self.beta, groups, self.cfg.eps)


class Reparameterizer:
    """Holds the per-filter scale of a reparameterized weight bank."""

    def __init__(self, cfg, weight):
        self.cfg = cfg
        filters = weight.shape[0]
        if cfg.kind == "wn":
            # start at the initial filter norms so the first forward pass is unchanged
            init = np.sqrt((weight.value.reshape(filters, -1) ** 2).sum(axis=1))
        else:
            init = np.ones(filters)
        self.gamma = ag.parameter(init)

    def parameters(self):
        return [self.gamma]

    def __call__(self, weight):
        return reparameterize_bank(weight, self.gamma, self.cfg)


def make_normalizer(cfg, channels):
    return None if cfg.kind == "none" else Normalizer(cfg, channels)


def make_reparameterizer(cfg, weight):
    return None if cfg.kind == "none" else Reparameterizer(cfg, weight)


__all__ = [
    "ACTIVATION_NORMS", "REPARAMETERIZERS", "ConfigError", "NormConfig", "ReparamConfig",
    "NormState", "batch_norm", "group_norm", "layer_norm", "instance_norm", "weight_align",
    "weight_norm", "reparameterize_bank", "Normalizer", "Reparameterizer",
    "make_normalizer", "make_reparameterizer", "sample_stat_count", "reset_sample_stat_count",
]
