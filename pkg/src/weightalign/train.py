"""SGD training loop, batch-size sweeps and WeightAlign scale ablations.

Update rule (weight decay folded into the gradient, lr applied to velocity)::

    g' = g + weight_decay * w
    v  = momentum * v + g'
    w  = w - lr * v
"""

import copy
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autograd as ag
from .data import AugmentConfig, augment
from .layers import NetworkSpec, build_network
from .normalize import ConfigError


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 5
    lr: float = 0.01
    lr_milestones: list = None
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    eval_every: int = 1
    eval_batch_size: int = 500
    augment: AugmentConfig = None
    base_batch_size: int = 64
    lr_scaling: str = "linear"
    divergence_factor: float = 10.0
    divergence_patience: int = 3
    snapshot_layers: list = None

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.lr_scaling not in ("linear", "none"):
            raise ConfigError("lr_scaling must be 'linear' or 'none'")

    def milestones(self):
        """Epoch indices where the lr is multiplied by ``lr_decay``.

        Default: at 50% and 75% of training (rounded up).
        """
        if self.lr_milestones is not None:
            return list(self.lr_milestones)
        return [math.ceil(0.5 * self.epochs), math.ceil(0.75 * self.epochs)]

    def lr_at(self, epoch):
        return self.lr * self.lr_decay ** sum(epoch >= m for m in self.milestones())

    def scaled_for(self, batch_size):
        """Copy for ``batch_size`` with the lr rescaled from ``base_batch_size``."""
        cfg = copy.deepcopy(self)
        cfg.batch_size = batch_size
        if self.lr_scaling == "linear":
            cfg.lr = self.lr * batch_size / self.base_batch_size
        return cfg

    def to_dict(self):
        d = asdict(self)
        d["augment"] = self.augment.to_dict() if self.augment else None
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunRecord:
    config: dict
    network: dict = None
    dataset: dict = None
    label: dict = field(default_factory=dict)
    epochs: list = field(default_factory=list)
    initial_loss: float = None
    diverged: bool = False
    divergence_reason: str = None
    skipped: bool = False
    skip_reason: str = None
    snapshots: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def final_test_error(self):
        for e in reversed(self.epochs):
            if e.get("test_error") is not None:
                return e["test_error"]
        return None

    def to_dict(self, timing=True):
        d = asdict(self)
        if not timing:
            d.pop("wall_time")
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_json(self, timing=True):
        return json.dumps(self.to_dict(timing), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def jsonl_lines(self):
        """One JSON object per completed epoch, each carrying the run context."""
        ctx = {"config": self.config, "network": self.network, "dataset": self.dataset,
               "label": self.label}
        lines = []
        for i, e in enumerate(self.epochs):
            last = i == len(self.epochs) - 1
            row = dict(ctx, **e, diverged=self.diverged and last,
                       divergence_reason=self.divergence_reason if last else None)
            lines.append(json.dumps(row, sort_keys=True))
        return lines


def sgd_step(params, grads, velocity, lr, momentum=0.9, weight_decay=5e-4, names=None):
    """In-place SGD with momentum and L2 weight decay over parallel lists of arrays.

    A ``None`` gradient counts as zero (decay still applies).  Returns
    ``(params, velocity)``.
    """
    for i, (w, g, v) in enumerate(zip(params, grads, velocity)):
        if g is None:
            g = np.zeros_like(w)
        elif not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise NonFiniteGradient(f"non-finite gradient in parameter {name}")
        if weight_decay:
            g = g + weight_decay * w
        v *= momentum
        v += g
        w -= lr * v
    return params, velocity


def evaluate(net, ds, batch_size=500):
    """``(error_percent, mean_loss)`` in eval mode."""
    wrong, loss = 0, 0.0
    with ag.no_grad():
        for s in range(0, len(ds), batch_size):
            x, y = ds.images[s:s + batch_size], ds.labels[s:s + batch_size]
            logits = net.forward(x, train=False)
            loss += float(ag.cross_entropy(logits, y).value) * len(y)
            wrong += int((logits.value.argmax(axis=1) != y).sum())
    n = max(len(ds), 1)
    return 100.0 * wrong / n, loss / n


def train(net, train_ds, test_ds, cfg, label=None):
    """Train ``net`` in place and return its :class:`RunRecord`.

    Deterministic given ``cfg.seed`` and the network seed.  A non-finite loss or
    gradient, or an epoch loss above ``divergence_factor`` times the first
    mini-batch loss for ``divergence_patience`` consecutive epochs, stops the run
    with ``diverged=True``.
    """
    if len(train_ds) == 0:
        raise ValueError("training set is empty")
    t0 = time.perf_counter()
    rec = RunRecord(config=cfg.to_dict(), network=net.spec.to_dict(),
                    dataset=train_ds.metadata(), label=dict(label or {}))
    names, params = zip(*net.named_parameters())
    velocity = [np.zeros_like(p.value) for p in params]
    order_rng = np.random.default_rng([cfg.seed, 1])
    aug_rng = np.random.default_rng([cfg.seed, 2])
    n = len(train_ds)
    bs = min(cfg.batch_size, n)
    above = 0

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = order_rng.permutation(n)
        losses, wrong, seen = [], 0, 0
        for s in range(0, n - bs + 1, bs):
            idx = perm[s:s + bs]
            x, y = train_ds.images[idx], train_ds.labels[idx]
            if cfg.augment is not None:
                x = augment(x, cfg.augment, aug_rng)
            logits = net.forward(x, train=True)
            loss = ag.cross_entropy(logits, y)
            lv = float(loss.value)
            if rec.initial_loss is None:
                rec.initial_loss = lv
            if not math.isfinite(lv):
                rec.diverged, rec.divergence_reason = True, f"non-finite loss in epoch {epoch}"
                break
            grads = ag.backward(loss)
            try:
                sgd_step([p.value for p in params], [grads.get(p) for p in params], velocity,
                         lr, cfg.momentum, cfg.weight_decay, names)
            except NonFiniteGradient as exc:
                rec.diverged, rec.divergence_reason = True, f"{exc} in epoch {epoch}"
                break
            losses.append(lv)
            wrong += int((logits.value.argmax(axis=1) != y).sum())
            seen += len(y)
        if rec.diverged:
            break
        entry = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
                 "train_error": 100.0 * wrong / max(seen, 1), "test_error": None, "test_loss": None}
        last = epoch == cfg.epochs - 1
        if test_ds is not None and ((epoch + 1) % cfg.eval_every == 0 or last):
            entry["test_error"], entry["test_loss"] = evaluate(net, test_ds, cfg.eval_batch_size)
        rec.epochs.append(entry)
        if cfg.snapshot_layers:
            from .statlab import snapshot_weight_distribution

            rec.snapshots.extend(
                snapshot_weight_distribution(net, i, epoch=epoch).to_dict() for i in cfg.snapshot_layers
            )
        above = above + 1 if entry["train_loss"] > cfg.divergence_factor * rec.initial_loss else 0
        if above >= cfg.divergence_patience:
            rec.diverged = True
            rec.divergence_reason = (
                f"loss above {cfg.divergence_factor}x initial for {above} consecutive epochs"
            )
            break
    rec.wall_time = time.perf_counter() - t0
    return rec


# -- experiment drivers ---------------------------------------------------------

def uses_batch_norm(spec):
    return any(l.norm.kind == "bn" for l in spec.layers)


def _run_arm(args):
    spec, train_ds, test_ds, cfg, label = args
    if cfg.batch_size == 1 and uses_batch_norm(spec):
        return RunRecord(config=cfg.to_dict(), network=spec.to_dict(), dataset=train_ds.metadata(),
                         label=label, skipped=True,
                         skip_reason="batch norm needs more than one sample per batch")
    net = build_network(spec)
    return train(net, train_ds, test_ds, cfg, label)


def run_arms(arms, jobs=1):
    """Run ``(spec, train, test, cfg, label)`` tuples, optionally in worker processes."""
    if jobs > 1 and len(arms) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_run_arm, arms))
    return [_run_arm(a) for a in arms]


def sweep_batch(spec, train_ds, test_ds, batch_sizes, cfg, label=None, jobs=1):
    """One run per batch size with the lr rescaled per ``cfg.lr_scaling``.

    Batch-norm networks are skipped (with a recorded reason) at batch size 1.
    """
    if isinstance(spec, dict):
        spec = NetworkSpec.from_dict(spec)
    if any(b < 1 for b in batch_sizes):
        raise ConfigError("batch sizes must be >= 1")
    arms = [(spec, train_ds, test_ds, cfg.scaled_for(b), dict(label or {}, batch_size=b))
            for b in batch_sizes]
    return run_arms(arms, jobs)


def with_multiplier(spec, multiplier):
    out = copy.deepcopy(spec)
    for ls in out.layers:
        if ls.reparam.kind == "wa":
            ls.reparam.multiplier = float(multiplier)
    return out


def ablate_scale(spec, train_ds, test_ds, multipliers, cfg, label=None, jobs=1):
    """One run per WeightAlign denominator multiplier."""
    if isinstance(spec, dict):
        spec = NetworkSpec.from_dict(spec)
    if not any(l.reparam.kind == "wa" for l in spec.layers):
        raise ConfigError("scale ablation needs WeightAlign on at least one layer")
    arms = [(with_multiplier(spec, m), train_ds, test_ds, cfg, dict(label or {}, multiplier=m))
            for m in multipliers]
    return run_arms(arms, jobs)
