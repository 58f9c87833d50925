"""Network building blocks and declarative network specifications.

A :class:`NetworkSpec` is an ordered list of :class:`LayerSpec` entries that
ends in exactly one ``classifier``.  :func:`build_network` checks shapes,
allocates parameters with Kaiming initialization and returns a
:class:`Network` whose :meth:`Network.forward` records an autograd graph.

Normalizers are attached to conv/dense layers and run after the linear map,
before the following ReLU.
"""

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .init import fan_in, kaiming_init, layer_rng
from .normalize import (
    ConfigError,
    NormConfig,
    ReparamConfig,
    make_normalizer,
    make_reparameterizer,
)
from .tensor import ShapeError, conv_output_size

LAYER_KINDS = (
    "conv", "dense", "relu", "maxpool", "avgpool", "flatten", "residual_block", "classifier",
)


@dataclass
class LayerSpec:
    kind: str
    filters: int = None
    kernel: int = 3
    stride: int = 1
    padding: int = None
    units: int = None
    pool: int = None
    norm: NormConfig = field(default_factory=NormConfig)
    reparam: ReparamConfig = field(default_factory=ReparamConfig)
    bias: bool = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        self.norm = NormConfig.from_dict(self.norm) if not isinstance(self.norm, NormConfig) else self.norm
        if not isinstance(self.reparam, ReparamConfig):
            self.reparam = ReparamConfig.from_dict(self.reparam)
        if self.padding is None:
            self.padding = self.kernel // 2

    @property
    def use_bias(self):
        if self.bias is not None:
            return bool(self.bias)
        # WA assumes zero bias; activation normalizers carry their own shift
        return self.reparam.kind != "wa" and self.norm.kind == "none"

    def to_dict(self):
        d = {"kind": self.kind}
        for key in ("filters", "kernel", "stride", "padding", "units", "pool", "bias"):
            d[key] = getattr(self, key)
        d["norm"] = self.norm.to_dict()
        d["reparam"] = self.reparam.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "kind" not in d:
            raise ConfigError(f"layer entry without 'kind': {d}")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown layer field(s) {sorted(unknown)} in {d['kind']!r} layer")
        d["norm"] = NormConfig.from_dict(d.get("norm"))
        d["reparam"] = ReparamConfig.from_dict(d.get("reparam"))
        return cls(**d)


@dataclass
class NetworkSpec:
    layers: list
    input_shape: tuple
    num_classes: int
    seed: int = 0

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l) for l in self.layers]
        self.input_shape = tuple(int(s) for s in self.input_shape)

    def to_dict(self):
        return {
            "layers": [l.to_dict() for l in self.layers],
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"layers", "input_shape", "num_classes", "seed"}
        if unknown:
            raise ConfigError(f"unknown network field(s): {sorted(unknown)}")
        return cls(
            layers=[LayerSpec.from_dict(l) for l in d["layers"]],
            input_shape=d["input_shape"],
            num_classes=d["num_classes"],
            seed=d.get("seed", 0),
        )

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# -- layer implementations ---------------------------------------------------

class Conv:
    def __init__(self, spec, in_shape, seed, path):
        c, h, w = in_shape
        f, k = spec.filters, spec.kernel
        if not f or f < 1:
            raise ConfigError("conv layer needs a positive 'filters'")
        self.stride, self.padding = spec.stride, spec.padding
        oh = conv_output_size(h, k, spec.stride, spec.padding)
        ow = conv_output_size(w, k, spec.stride, spec.padding)
        self.out_shape = (f, oh, ow)
        shape = (f, c, k, k)
        self.weight = ag.parameter(kaiming_init(shape, fan_in(shape), layer_rng(seed, *path, 0)))
        self.bias = ag.parameter(np.zeros(f)) if spec.use_bias else None
        self.reparam = make_reparameterizer(spec.reparam, self.weight)
        self.norm = make_normalizer(spec.norm, f)

    def effective_weight(self):
        return self.reparam(self.weight) if self.reparam else self.weight

    def forward(self, x, train=True):
        out = ag.conv2d(x, self.effective_weight(), self.bias, self.stride, self.padding)
        return self.norm(out, train) if self.norm else out

    def named_parameters(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        if self.reparam:
            out.append(("reparam.gamma", self.reparam.gamma))
        if self.norm:
            out += [("norm.gamma", self.norm.gamma), ("norm.beta", self.norm.beta)]
        return out


class Dense:
    def __init__(self, spec, in_shape, seed, path, units=None):
        fin = int(np.prod(in_shape))
        units = units if units is not None else spec.units
        if not units or units < 1:
            raise ConfigError("dense layer needs a positive 'units'")
        self.out_shape = (units,)
        shape = (units, fin)
        self.weight = ag.parameter(kaiming_init(shape, fin, layer_rng(seed, *path, 0)))
        self.bias = ag.parameter(np.zeros(units)) if spec.use_bias else None
        self.reparam = make_reparameterizer(spec.reparam, self.weight)
        self.norm = make_normalizer(spec.norm, units)

    def effective_weight(self):
        return self.reparam(self.weight) if self.reparam else self.weight

    def forward(self, x, train=True):
        if x.ndim != 2:
            x = ag.flatten(x)
        out = ag.matmul(x, ag.transpose(self.effective_weight(), (1, 0)))
        if self.bias is not None:
            out = out + self.bias
        return self.norm(out, train) if self.norm else out

    named_parameters = Conv.named_parameters


class ReLU:
    def __init__(self, in_shape):
        self.out_shape = in_shape

    def forward(self, x, train=True):
        return ag.relu(x)

    def named_parameters(self):
        return []


class MaxPool:
    def __init__(self, spec, in_shape):
        p = spec.pool or 2
        c, h, w = _spatial(in_shape, "maxpool")
        if h % p or w % p:
            raise ShapeError(f"pool size {p} does not tile spatial extent {h}x{w}")
        self.pool = p
        self.out_shape = (c, h // p, w // p)

    def forward(self, x, train=True):
        return ag.maxpool2d(x, self.pool)

    def named_parameters(self):
        return []


class AvgPool:
    """Average pooling; ``pool=None`` is global average pooling to 1x1."""

    def __init__(self, spec, in_shape):
        c, h, w = _spatial(in_shape, "avgpool")
        p = spec.pool
        if p is None:
            self.out_shape = (c, 1, 1)
        else:
            if h % p or w % p:
                raise ShapeError(f"pool size {p} does not tile spatial extent {h}x{w}")
            self.out_shape = (c, h // p, w // p)
        self.pool = p

    def forward(self, x, train=True):
        return ag.avgpool2d(x, self.pool)

    def named_parameters(self):
        return []


class Flatten:
    def __init__(self, in_shape):
        self.out_shape = (int(np.prod(in_shape)),)

    def forward(self, x, train=True):
        return ag.flatten(x)

    def named_parameters(self):
        return []


class ResidualBlock:
    """conv-norm-relu-conv-norm plus shortcut, then ReLU.

    A 1x1 projection (with the block's normalizer and reparameterizer) replaces
    the identity shortcut when the channel count or stride changes.
    """

    def __init__(self, spec, in_shape, seed, path):
        c = _spatial(in_shape, "residual_block")[0]
        f = spec.filters or c
        conv = dict(filters=f, kernel=spec.kernel, norm=spec.norm, reparam=spec.reparam, bias=spec.bias)
        self.conv1 = Conv(LayerSpec("conv", stride=spec.stride, **conv), in_shape, seed, (*path, 1))
        self.conv2 = Conv(LayerSpec("conv", stride=1, **conv), self.conv1.out_shape, seed, (*path, 2))
        self.out_shape = self.conv2.out_shape
        self.shortcut = None
        if f != c or spec.stride != 1:
            proj = LayerSpec("conv", filters=f, kernel=1, stride=spec.stride, padding=0,
                             norm=spec.norm, reparam=spec.reparam, bias=spec.bias)
            self.shortcut = Conv(proj, in_shape, seed, (*path, 3))
            if self.shortcut.out_shape != self.out_shape:
                raise ShapeError(
                    f"shortcut shape {self.shortcut.out_shape} differs from branch shape {self.out_shape}"
                )

    def forward(self, x, train=True):
        h = ag.relu(self.conv1.forward(x, train))
        h = self.conv2.forward(h, train)
        skip = self.shortcut.forward(x, train) if self.shortcut else x
        if skip.shape != h.shape:
            raise ShapeError(f"cannot add shortcut {skip.shape} to branch {h.shape}")
        return ag.relu(h + skip)

    def named_parameters(self):
        out = [(f"conv1.{n}", p) for n, p in self.conv1.named_parameters()]
        out += [(f"conv2.{n}", p) for n, p in self.conv2.named_parameters()]
        if self.shortcut:
            out += [(f"shortcut.{n}", p) for n, p in self.shortcut.named_parameters()]
        return out


def residual_block_forward(x, block, train=True):
    return block.forward(ag.constant(x), train)


def _spatial(shape, kind):
    if len(shape) != 3:
        raise ShapeError(f"{kind} needs a (C, H, W) input, got {shape}")
    return shape


# -- network -----------------------------------------------------------------

class Network:
    def __init__(self, spec, layers):
        self.spec = spec
        self.layers = layers

    def forward(self, x, train=True, capture=False):
        """Logits for ``x``; with ``capture=True`` also every layer's output."""
        x = ag.constant(x)
        expected = self.spec.input_shape
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"network expects input (N, {', '.join(map(str, expected))}), got {x.shape}")
        acts = []
        for layer in self.layers:
            x = layer.forward(x, train)
            if capture:
                acts.append(x)
        return (x, acts) if capture else x

    __call__ = forward

    def named_parameters(self):
        return [(f"{i}.{n}", p) for i, layer in enumerate(self.layers) for n, p in layer.named_parameters()]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def norm_states(self):
        """``(name, NormState)`` for every batch-norm layer (running statistics)."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, sub in _convs(layer):
                if sub.norm is not None:
                    out.append((f"{i}.{name}", sub.norm.state))
        return out

    def state_dict(self):
        state = {name: p.value.copy() for name, p in self.named_parameters()}
        for name, st in self.norm_states():
            state[f"{name}.running_mean"] = st.running_mean.copy()
            state[f"{name}.running_var"] = st.running_var.copy()
        return state

    def load_state_dict(self, state):
        for name, p in self.named_parameters():
            p.value = np.array(state[name], dtype=p.value.dtype)
        for name, st in self.norm_states():
            st.running_mean = np.array(state[f"{name}.running_mean"])
            st.running_var = np.array(state[f"{name}.running_var"])

    def reparam_layers(self):
        """``(index, layer)`` for every conv/dense layer carrying a reparameterizer."""
        return [(i, sub) for i, layer in enumerate(self.layers)
                for _, sub in _convs(layer) if sub.reparam is not None]

    def conv_layer_indices(self):
        return [i for i, l in enumerate(self.layers) if isinstance(l, (Conv, ResidualBlock))]


def _convs(layer):
    if isinstance(layer, (Conv, Dense)):
        return [("", layer)]
    if isinstance(layer, ResidualBlock):
        subs = [("conv1", layer.conv1), ("conv2", layer.conv2)]
        if layer.shortcut:
            subs.append(("shortcut", layer.shortcut))
        return subs
    return []


def build_network(spec):
    """Validate ``spec`` and allocate an initialized :class:`Network`."""
    if isinstance(spec, dict):
        spec = NetworkSpec.from_dict(spec)
    if not spec.layers:
        raise ConfigError("network has no layers")
    kinds = [l.kind for l in spec.layers]
    if kinds.count("classifier") != 1 or kinds[-1] != "classifier":
        raise ConfigError("network must contain exactly one classifier layer, placed last")
    if spec.layers[-1].reparam.kind == "wa":
        raise ConfigError(
            "WeightAlign must not be applied to the final classifier layer "
            "(the classifier keeps its plain weights)"
        )
    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        raise ConfigError(f"input_shape must be (C, H, W) with positive extents, got {spec.input_shape}")
    if spec.num_classes < 1:
        raise ConfigError("num_classes must be >= 1")

    shape = spec.input_shape
    layers = []
    for i, ls in enumerate(spec.layers):
        try:
            layer = _make_layer(ls, shape, spec, i)
        except (ShapeError, ConfigError) as exc:
            raise type(exc)(f"layer {i} ({ls.kind}): {exc}") from None
        layers.append(layer)
        shape = layer.out_shape
    return Network(spec, layers)


def _make_layer(ls, shape, spec, i):
    kind = ls.kind
    if kind == "conv":
        return Conv(ls, _spatial(shape, "conv"), spec.seed, (i,))
    if kind == "dense":
        return Dense(ls, shape, spec.seed, (i,))
    if kind == "classifier":
        return Dense(ls, shape, spec.seed, (i,), units=spec.num_classes)
    if kind == "relu":
        return ReLU(shape)
    if kind == "maxpool":
        return MaxPool(ls, shape)
    if kind == "avgpool":
        return AvgPool(ls, shape)
    if kind == "flatten":
        return Flatten(shape)
    return ResidualBlock(ls, shape, spec.seed, (i,))


def forward(net, x, mode="train"):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return net.forward(x, train=(mode == "train"))


def cross_entropy(logits, labels):
    return ag.cross_entropy(logits, labels)


# -- variants and stock architectures ----------------------------------------

VARIANTS = ("baseline", "bn", "gn", "ln", "in", "wa", "wn",
            "wa+bn", "wa+gn", "wa+ln", "wa+in", "wn+bn", "wn+gn", "wn+ln", "wn+in")


def parse_variant(name):
    """``"wa+gn"`` -> ``("wa", "gn")``; component order does not matter."""
    parts = [p.strip().lower() for p in name.split("+")]
    reparam, norm = "none", "none"
    for p in parts:
        if p in ("wa", "wn") and reparam == "none":
            reparam = p
        elif p in ("bn", "gn", "ln", "in") and norm == "none":
            norm = p
        elif p == "baseline" and len(parts) == 1:
            pass
        else:
            raise ConfigError(f"unknown normalization variant {name!r}")
    return reparam, norm


def apply_variant(spec, variant, norm_overrides=None, reparam_overrides=None):
    """Copy of ``spec`` with the variant's normalizer/reparameterizer on every conv layer.

    The classifier is never touched.
    """
    reparam, norm = parse_variant(variant)
    out = copy.deepcopy(spec)
    for ls in out.layers:
        if ls.kind in ("conv", "residual_block"):
            ls.norm = NormConfig(kind=norm, **(norm_overrides or {}))
            ls.reparam = ReparamConfig(kind=reparam, **(reparam_overrides or {}))
    return out


def drift_net_spec(channels=16, depth=7, kernel=3, input_shape=(3, 16, 16), num_classes=10, seed=0):
    """Untrained-drift network: ``depth`` conv+ReLU layers, global pooling, classifier.

    Kernel size and width are free choices; all layers are bias-free.
    """
    layers = []
    for _ in range(depth):
        layers.append(LayerSpec("conv", filters=channels, kernel=kernel, bias=False))
        layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("avgpool"))
    layers.append(LayerSpec("classifier", bias=False))
    return NetworkSpec(layers, input_shape, num_classes, seed)


def small_cnn_spec(widths=(8, 16, 16, 32), pool_after=(0, 2), input_shape=(1, 28, 28),
                   num_classes=10, seed=0, strides=None, head="flatten"):
    """3x3 conv+ReLU layers with 2x2 max pooling after the listed layer indices.

    ``strides`` gives one stride per conv; ``head`` is ``"flatten"`` or
    ``"avgpool"`` (global average pooling) before the classifier.
    """
    strides = strides or (1,) * len(widths)
    if len(strides) != len(widths):
        raise ConfigError("need one stride per conv layer")
    if head not in ("flatten", "avgpool"):
        raise ConfigError(f"unknown head {head!r}")
    layers = []
    for i, (f, s) in enumerate(zip(widths, strides)):
        layers.append(LayerSpec("conv", filters=f, kernel=3, stride=s))
        layers.append(LayerSpec("relu"))
        if i in pool_after:
            layers.append(LayerSpec("maxpool", pool=2))
    if head == "avgpool":
        layers.append(LayerSpec("avgpool"))
    layers.append(LayerSpec("flatten"))
    layers.append(LayerSpec("classifier"))
    return NetworkSpec(layers, input_shape, num_classes, seed)


def desk_cnn_spec(seed=0, input_shape=(1, 28, 28), num_classes=10):
    """The 4-conv network used by the desk-scale experiments.

    28x28 -> pool -> 14x14 -> pool -> 7x7 -> stride 2 -> 4x4 -> global average.
    The last two convs see 4x4 maps, so at batch size 2 a batch-norm channel
    is estimated from 32 values.
    """
    return small_cnn_spec(widths=(8, 16, 32, 32), pool_after=(0, 1), input_shape=input_shape,
                          num_classes=num_classes, seed=seed, strides=(1, 1, 2, 1), head="avgpool")


def small_resnet_spec(widths=(16, 32), blocks=1, input_shape=(3, 32, 32), num_classes=10, seed=0):
    """Stem conv, residual stages separated by max pooling, global average pooling."""
    layers = [LayerSpec("conv", filters=widths[0], kernel=3), LayerSpec("relu")]
    for s, f in enumerate(widths):
        if s:
            layers.append(LayerSpec("maxpool", pool=2))
        for _ in range(blocks):
            layers.append(LayerSpec("residual_block", filters=f, kernel=3))
    layers.append(LayerSpec("avgpool"))
    layers.append(LayerSpec("classifier"))
    return NetworkSpec(layers, input_shape, num_classes, seed)
