"""Monte-Carlo checks of the moment identities behind WeightAlign, and
per-channel activation/weight statistics.

The verifiers sample ``x = sum_i w_i * Y_i`` (one filter response) and compare
empirical moments with their closed forms:

* ``E[x] = n E[w] E[Y]``
* ``Var[x] = n Var[w] E[Y^2]`` when ``E[w] = 0``
* ``E[relu(Z)^2] = Var[Z] / 2`` for ``Z`` symmetric about zero
* ``X * Y`` is symmetric about zero whenever ``Y`` is
"""

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats as sps

from . import autograd as ag
from .layers import Conv, Dense, ResidualBlock, apply_variant, build_network, drift_net_spec
from .tensor import get_dtype

MIN_SAMPLES = 10_000
DEFAULT_SAMPLES = 1_000_000
CHUNK_ELEMENTS = 4_000_000
HIST_BINS = 64
HIST_SIGMAS = 4.0
SKEW_LIMIT = 0.05

# drift thresholds, frozen after calibration over 40 seeds (see tools/calibrate_drift.py)
DRIFT_LAYER = 4
DRIFT_CHANNELS = tuple(range(8))
DRIFT_MEAN_RATIO = 0.2
DRIFT_STD_RATIO = 4.0
DRIFT_CONSTANCY = 0.9


# -- distributions ----------------------------------------------------------------

@dataclass(frozen=True)
class Dist:
    """A scalar sampler with known moments.  ``normal`` takes a variance."""

    family: str
    a: float = 0.0
    b: float = 1.0

    @classmethod
    def normal(cls, mean=0.0, var=1.0):
        return cls("normal", float(mean), float(var))

    @classmethod
    def uniform(cls, lo=0.0, hi=1.0):
        return cls("uniform", float(lo), float(hi))

    @classmethod
    def exponential(cls, rate=1.0):
        return cls("exponential", float(rate), 0.0)

    @classmethod
    def constant(cls, value):
        return cls("constant", float(value), 0.0)

    @property
    def mean(self):
        if self.family == "uniform":
            return (self.a + self.b) / 2
        if self.family == "exponential":
            return 1 / self.a
        return self.a

    @property
    def var(self):
        if self.family == "normal":
            return self.b
        if self.family == "uniform":
            return (self.b - self.a) ** 2 / 12
        if self.family == "exponential":
            return 1 / self.a ** 2
        return 0.0

    @property
    def second_moment(self):
        return self.var + self.mean ** 2

    @property
    def symmetric(self):
        """Symmetric about zero."""
        return self.family != "exponential" and self.mean == 0

    def sample(self, rng, size):
        if self.family == "normal":
            return self.a + math.sqrt(self.b) * rng.standard_normal(size)
        if self.family == "uniform":
            return rng.uniform(self.a, self.b, size)
        if self.family == "exponential":
            return rng.exponential(1 / self.a, size)
        if self.family == "constant":
            return np.full(size, self.a)
        raise ValueError(f"unknown distribution family {self.family!r}")

    def __str__(self):
        if self.family == "constant":
            return f"const({self.a:g})"
        if self.family == "exponential":
            return f"exp({self.a:g})"
        return f"{self.family}({self.a:g}, {self.b:g})"


@dataclass
class McResult:
    name: str
    estimate: float
    target: float
    samples: int
    stderr: float
    z: float = 3.0
    atol: float = 1e-3
    passed: bool = False
    control: bool = False
    seed: int = 0
    detail: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _check_samples(samples):
    if samples < 1:
        raise ValueError("samples must be positive")
    if samples < MIN_SAMPLES:
        warnings.warn(
            f"{samples} samples is below {MIN_SAMPLES}; stderr gates widen accordingly",
            stacklevel=3,
        )


def _stderr_floor(se, target):
    # degenerate samplers give an exact zero; keep stderr strictly positive
    return max(float(se), np.finfo(float).eps * max(1.0, abs(target)))


def _result(name, estimate, target, samples, se, seed, z=3.0, atol=1e-3, control=False, **detail):
    se = _stderr_floor(se, target)
    passed = abs(estimate - target) <= z * se + atol
    return McResult(name, float(estimate), float(target), int(samples), se, z, atol,
                    bool(passed), control, seed, detail)


def _filter_responses(dist_w, dist_y, n, samples, rng):
    """``samples`` draws of ``sum_i w_i Y_i`` with independent ``w_i``, ``Y_i``."""
    out = np.empty(samples)
    rows = max(1, CHUNK_ELEMENTS // max(n, 1))
    for s in range(0, samples, rows):
        m = min(rows, samples - s)
        out[s:s + m] = (dist_w.sample(rng, (m, n)) * dist_y.sample(rng, (m, n))).sum(axis=1)
    return out


def verify_mean_identity(dist_w, dist_y, n, samples=DEFAULT_SAMPLES, seed=0):
    """MC estimate of ``E[x]`` against ``n E[w] E[Y]``."""
    _check_samples(samples)
    x = _filter_responses(dist_w, dist_y, n, samples, np.random.default_rng(seed))
    return _result(f"mean w~{dist_w} Y~{dist_y} n={n}", x.mean(), n * dist_w.mean * dist_y.mean,
                   samples, x.std() / math.sqrt(samples), seed)


def verify_variance_identity(dist_w, dist_y, n, samples=DEFAULT_SAMPLES, seed=0):
    """MC estimate of ``Var[x]`` against ``n Var[w] E[Y^2]``; needs ``E[w] = 0``."""
    if dist_w.mean != 0:
        raise ValueError(f"variance identity needs a zero-mean weight sampler, got mean {dist_w.mean}")
    _check_samples(samples)
    x = _filter_responses(dist_w, dist_y, n, samples, np.random.default_rng(seed))
    d = x - x.mean()
    m2, m4 = np.mean(d ** 2), np.mean(d ** 4)
    se = math.sqrt(max(m4 - m2 ** 2, 0.0) / samples)
    return _result(f"var w~{dist_w} Y~{dist_y} n={n}", m2, n * dist_w.var * dist_y.second_moment,
                   samples, se, seed)


def verify_relu_halving(dist_z, samples=DEFAULT_SAMPLES, seed=0):
    """MC estimate of ``E[relu(Z)^2]`` against ``Var[Z] / 2``."""
    _check_samples(samples)
    z = dist_z.sample(np.random.default_rng(seed), samples)
    r2 = np.maximum(z, 0.0) ** 2
    return _result(f"relu Z~{dist_z}", r2.mean(), dist_z.var / 2, samples,
                   r2.std() / math.sqrt(samples), seed)


def skewness(z):
    d = z - z.mean()
    m2 = np.mean(d ** 2)
    return float(np.mean(d ** 3) / m2 ** 1.5) if m2 > 0 else 0.0


def verify_product_symmetry(dist_x, dist_y, samples=DEFAULT_SAMPLES, seed=0, control=False):
    """Skewness of ``Z = X Y`` (passes when within +-0.05) plus a KS statistic of Z vs -Z.

    ``control=True`` marks a negative control, expected to fail.
    """
    _check_samples(samples)
    rng = np.random.default_rng(seed)
    z = dist_x.sample(rng, samples) * dist_y.sample(rng, samples)
    d = z - z.mean()
    m2 = np.mean(d ** 2)
    g1 = skewness(z)
    if m2 > 0:
        m4, m6 = np.mean(d ** 4) / m2 ** 2, np.mean(d ** 6) / m2 ** 3
        se = math.sqrt(max(m6 - 6 * m4 + 9, 0.0) / samples)
    else:
        se = 0.0
    # z and -z are not independent samples, so only the KS statistic is reported
    ks = sps.ks_2samp(z, -z).statistic
    return _result(f"symmetry X~{dist_x} Y~{dist_y}", g1, 0.0, samples, se, seed,
                   z=0.0, atol=SKEW_LIMIT, control=control, ks_statistic=float(ks))


def default_suite(samples=DEFAULT_SAMPLES, seed=0, include_controls=True):
    """Every identity check over the standard distribution families."""
    N, U, E, C = Dist.normal, Dist.uniform, Dist.exponential, Dist.constant
    out = [
        verify_mean_identity(N(0, 1), N(2, 1), 100, samples, seed),
        verify_mean_identity(N(0.5, 1), N(2, 1), 100, samples, seed + 1),
        verify_mean_identity(C(1), N(3, 1), 1, samples, seed + 2),
        verify_variance_identity(N(0, 1), C(1), 10, samples, seed + 3),
        verify_variance_identity(N(0, 2 / 50), N(0, 1), 50, samples, seed + 4),
        verify_variance_identity(N(0, 1), C(0), 10, samples, seed + 5),
        verify_relu_halving(N(0, 4), samples, seed + 6),
        verify_relu_halving(U(-1, 1), samples, seed + 7),
        verify_relu_halving(C(0), samples, seed + 8),
        verify_product_symmetry(U(0, 1), N(0, 1), samples, seed + 9),
        verify_product_symmetry(E(1), N(0, 1), samples, seed + 10),
    ]
    if include_controls:
        out.append(verify_product_symmetry(E(1), E(1), samples, seed + 11, control=True))
    return out


# -- statistics reports ---------------------------------------------------------

CSV_COLUMNS = ("layer", "channel", "epoch", "mean", "var", "bin_lo", "bin_hi", "count")


@dataclass
class ChannelStats:
    """Moments and a fixed-bin histogram; ``channel == -1`` means the whole layer."""

    layer: str
    channel: int
    epoch: int
    mean: float
    var: float
    count: int
    edges: list
    counts: list


def histogram(values, bins=HIST_BINS, sigmas=HIST_SIGMAS):
    """Counts over ``bins`` uniform bins spanning ``mean +- sigmas*std``.

    Values outside the span are clipped into the end bins, so counts always sum
    to ``values.size``.  A constant input gets a unit-width span around itself.
    """
    v = np.ravel(values).astype(np.float64)
    mu, sd = float(v.mean()), float(v.std())
    half = sigmas * sd if sd > 0 else 0.5
    edges = np.linspace(mu - half, mu + half, bins + 1)
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, bins - 1)
    return edges, np.bincount(idx, minlength=bins)


def channel_stats(values, layer, channel, epoch):
    # sorting first makes the moments independent of sample order
    v = np.sort(np.ravel(values).astype(np.float64))
    mu = float(v.mean())
    var = float(np.mean((v - mu) ** 2))
    edges, counts = histogram(v)
    return ChannelStats(str(layer), int(channel), epoch, mu, var, int(v.size),
                        edges.tolist(), counts.tolist())


@dataclass
class StatsReport:
    entries: list = field(default_factory=list)
    argmax_constancy: float = None
    metadata: dict = field(default_factory=dict)

    def select(self, layer=None, channel=None):
        return [e for e in self.entries
                if (layer is None or e.layer == str(layer)) and (channel is None or e.channel == channel)]

    def to_dict(self):
        return {"entries": [asdict(e) for e in self.entries],
                "argmax_constancy": self.argmax_constancy, "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d):
        return cls([ChannelStats(**e) for e in d["entries"]], d.get("argmax_constancy"),
                   d.get("metadata", {}))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def to_csv(self):
        """One row per histogram bin; ``mean`` and ``var`` repeat on each bin row."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for e in self.entries:
            epoch = "" if e.epoch is None else e.epoch
            for lo, hi, c in zip(e.edges[:-1], e.edges[1:], e.counts):
                w.writerow([e.layer, e.channel, epoch, repr(e.mean), repr(e.var), repr(lo), repr(hi), c])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, argmax_constancy=None, metadata=None):
        groups = {}
        for row in csv.DictReader(io.StringIO(text)):
            key = (row["layer"], int(row["channel"]), row["epoch"])
            g = groups.setdefault(key, {"mean": float(row["mean"]), "var": float(row["var"]),
                                        "edges": [float(row["bin_lo"])], "counts": []})
            g["edges"].append(float(row["bin_hi"]))
            g["counts"].append(int(row["count"]))
        entries = [ChannelStats(layer, ch, int(ep) if ep else None, g["mean"], g["var"],
                                sum(g["counts"]), g["edges"], g["counts"])
                   for (layer, ch, ep), g in groups.items()]
        return cls(entries, argmax_constancy, metadata or {})


def argmax_constancy(logits):
    """Share of the batch whose argmax equals the batch's most frequent class."""
    pred = np.asarray(logits).argmax(axis=1)
    return float(np.bincount(pred).max() / len(pred))


def collect_channel_stats(net, x, layers, channels=None, train=True, epoch=None):
    """Per-channel activation statistics of the selected layer outputs.

    ``layers`` index ``net.layers``; ``channels`` (None = all) index the output
    channels of every selected layer.  Statistics pool over batch and space.
    """
    n_layers = len(net.layers)
    for i in layers:
        if not 0 <= i < n_layers:
            raise IndexError(f"layer selector {i} out of range (network has {n_layers} layers)")
    with ag.no_grad():
        logits, acts = net.forward(x, train=train, capture=True)
    report = StatsReport(argmax_constancy=argmax_constancy(logits.value),
                         metadata={"layers": list(layers), "batch": int(len(x)),
                                   "channels": None if channels is None else list(channels)})
    for i in layers:
        a = acts[i].value
        width = a.shape[1]
        for c in range(width) if channels is None else channels:
            if not 0 <= c < width:
                raise IndexError(f"channel selector {c} out of range for layer {i} ({width} channels)")
            report.entries.append(channel_stats(a[:, c], i, c, epoch))
    return report


def _weight_layer(net, layer):
    idx, _, sub = str(layer).partition(".")
    i = int(idx)
    if not 0 <= i < len(net.layers):
        raise IndexError(f"layer {i} out of range")
    mod = net.layers[i]
    if isinstance(mod, ResidualBlock):
        mod = getattr(mod, sub or "conv1")
    if not isinstance(mod, (Conv, Dense)):
        raise ValueError(f"layer {layer} has no weights")
    return mod


def snapshot_weight_distribution(net, layer, channel=None, epoch=None):
    """Histogram of the effective (post-reparameterization) weights of one layer.

    ``layer`` is an index, or ``"i.conv1"``-style for residual sub-convolutions;
    ``channel`` selects one filter, None the whole layer.
    """
    mod = _weight_layer(net, layer)
    with ag.no_grad():
        w = mod.effective_weight().value
    bank = w.reshape(w.shape[0], -1)
    values = bank if channel is None else bank[channel]
    entry = channel_stats(values, layer, -1 if channel is None else channel, epoch)
    return StatsReport([entry], None, {"fan_in": int(bank.shape[1]), "scope": "weights"})


# -- drift experiment -------------------------------------------------------------

def channel_alignment(report, layer=DRIFT_LAYER, mean_ratio=DRIFT_MEAN_RATIO, std_ratio=DRIFT_STD_RATIO):
    """True when every selected channel has |mean| <= mean_ratio*std and the
    largest/smallest channel std ratio is at most ``std_ratio``."""
    es = report.select(layer=layer)
    stds = np.sqrt([e.var for e in es])
    if not len(es) or stds.min() <= 0:
        return False
    centred = all(abs(e.mean) <= mean_ratio * s for e, s in zip(es, stds))
    return bool(centred and stds.max() / stds.min() <= std_ratio)


def drift_trial(variant, seed, batch=128, net_kwargs=None, layer=DRIFT_LAYER, channels=DRIFT_CHANNELS):
    """One untrained network of ``variant`` fed a standard-normal batch."""
    spec = apply_variant(drift_net_spec(seed=seed, **(net_kwargs or {})), variant)
    net = build_network(spec)
    rng = np.random.default_rng([seed, 0xD1F7])
    x = rng.standard_normal((batch, *spec.input_shape)).astype(get_dtype(), copy=False)
    report = collect_channel_stats(net, x, [layer], channels, train=True)
    report.metadata.update(variant=variant, seed=seed, network=spec.to_dict())
    return report


def drift_experiment(variants=("baseline", "wa"), seeds=range(20), batch=128, net_kwargs=None):
    """Per variant: fraction of seeds with constant predictions and with aligned channels."""
    out = {}
    for v in variants:
        reports = [drift_trial(v, s, batch, net_kwargs) for s in seeds]
        out[v] = {
            "constancy": [r.argmax_constancy for r in reports],
            "constant_fraction": float(np.mean([r.argmax_constancy >= DRIFT_CONSTANCY for r in reports])),
            "aligned_fraction": float(np.mean([channel_alignment(r) for r in reports])),
            "reports": reports,
        }
    return out
