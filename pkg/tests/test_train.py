import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weightalign import autograd as ag
from weightalign.data import synthetic_classification
from weightalign.layers import apply_variant, build_network, small_cnn_spec
from weightalign.normalize import ConfigError, sample_stat_count
from weightalign.train import (
    NonFiniteGradient, RunRecord, TrainConfig, ablate_scale, evaluate, sgd_step,
    sweep_batch, train, with_multiplier,
)


def tiny_spec(variant="baseline", seed=0):
    spec = small_cnn_spec(widths=(4, 8), pool_after=(0,), input_shape=(1, 8, 8), num_classes=4, seed=seed)
    return apply_variant(spec, variant)


@pytest.fixture(scope="module")
def toy_data():
    tr = synthetic_classification(96, (1, 8, 8), 4, seed=3, noise=1.0, split="train")
    te = synthetic_classification(40, (1, 8, 8), 4, seed=3, noise=1.0, split="test")
    return tr, te


def toy_cfg(**kw):
    base = dict(batch_size=16, epochs=2, lr=0.05, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def arr(*v):
    return [np.array(x, dtype=float) for x in v]


# -- sgd_step ----------------------------------------------------------------

def test_sgd_vanilla_step():
    w, v = arr(1.0), arr(0.0)
    sgd_step(w, arr(0.5), v, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert w[0] == pytest.approx(0.95)


def test_sgd_momentum_only():
    w, v = arr(1.0), arr(1.0)
    sgd_step(w, arr(0.0), v, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert v[0] == pytest.approx(0.9)
    assert w[0] == pytest.approx(0.91)


def test_sgd_decay_as_gradient():
    w, v = arr(2.0), arr(0.0)
    sgd_step(w, arr(0.0), v, lr=0.1, momentum=0.0, weight_decay=0.5)
    assert v[0] == pytest.approx(1.0)
    assert w[0] == pytest.approx(1.9)


def test_sgd_none_gradient_is_zero():
    w, v = arr([1.0, -2.0]), arr([0.0, 0.0])
    sgd_step(w, [None], v, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert np.array_equal(w[0], [1.0, -2.0])


def test_sgd_nonfinite_names_parameter():
    with pytest.raises(NonFiniteGradient, match="layer2.weight"):
        sgd_step(arr(1.0, 1.0), arr(0.0, np.nan), arr(0.0, 0.0), 0.1,
                 names=["layer0.weight", "layer2.weight"])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(1e-4, 0.5), st.integers(0, 2**31))
def test_weight_decay_contracts_norm(lr, wd, seed):
    # zero momentum: heavy-ball iterates may overshoot and grow between steps
    m = 0.0
    w = [np.random.default_rng(seed).standard_normal(7) + 0.1]
    v = [np.zeros(7)]
    norms = [np.linalg.norm(w[0])]
    for _ in range(5):
        sgd_step(w, [None], v, lr, m, wd)
        norms.append(np.linalg.norm(w[0]))
    assert all(b < a for a, b in zip(norms, norms[1:]))


# -- config ------------------------------------------------------------------

def test_default_milestones_and_lr():
    cfg = TrainConfig(epochs=5, lr=0.1)
    assert cfg.milestones() == [3, 4]
    assert [cfg.lr_at(e) for e in range(5)] == pytest.approx([0.1, 0.1, 0.1, 0.01, 0.001])


def test_linear_lr_scaling():
    cfg = TrainConfig(lr=0.01)
    assert cfg.scaled_for(8).lr == pytest.approx(0.00125)
    assert cfg.scaled_for(8).batch_size == 8
    assert TrainConfig(lr=0.01, lr_scaling="none").scaled_for(8).lr == 0.01


@pytest.mark.parametrize("bad", [dict(batch_size=0), dict(lr=-1.0), dict(momentum=1.0),
                                 dict(lr_scaling="sqrt"), dict(epochs=-1)])
def test_config_rejects_bad_values(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})


# -- train -------------------------------------------------------------------

def test_lr_zero_leaves_params_bit_identical(toy_data):
    net = build_network(tiny_spec("wa"))
    before = [p.value.copy() for p in net.parameters()]
    train(net, *toy_data, toy_cfg(lr=0.0))
    assert all(np.array_equal(a, p.value) for a, p in zip(before, net.parameters()))


@pytest.mark.parametrize("variant", ["wa", "bn"])
def test_training_is_deterministic(toy_data, variant):
    a = train(build_network(tiny_spec(variant)), *toy_data, toy_cfg())
    b = train(build_network(tiny_spec(variant)), *toy_data, toy_cfg())
    assert a.to_json(timing=False) == b.to_json(timing=False)


def test_training_reduces_loss(toy_data):
    rec = train(build_network(tiny_spec("wa")), *toy_data, toy_cfg(epochs=4))
    assert rec.epochs[-1]["train_loss"] < rec.initial_loss
    assert not rec.diverged


def test_wa_eval_is_batch_independent(toy_data):
    tr, te = toy_data
    net = build_network(tiny_spec("wa"))
    train(net, tr, te, toy_cfg())
    assert evaluate(net, te, 1) == pytest.approx(evaluate(net, te, 64), rel=0, abs=1e-12)


def test_wa_training_reads_no_sample_statistics(toy_data):
    train(build_network(tiny_spec("wa")), *toy_data, toy_cfg())
    assert sample_stat_count() == 0
    train(build_network(tiny_spec("bn")), *toy_data, toy_cfg(epochs=1))
    assert sample_stat_count() > 0


def test_runrecord_roundtrip(toy_data):
    rec = train(build_network(tiny_spec("gn")), *toy_data, toy_cfg(snapshot_layers=[0]))
    back = RunRecord.from_json(rec.to_json())
    assert back == rec
    assert back.to_json() == rec.to_json()


def test_jsonl_has_one_line_per_epoch(toy_data):
    rec = train(build_network(tiny_spec("wa")), *toy_data, toy_cfg(epochs=3))
    lines = rec.jsonl_lines()
    assert len(lines) == 3
    assert [json.loads(l)["epoch"] for l in lines] == [0, 1, 2]


def test_empty_training_set_rejected(toy_data):
    tr, te = toy_data
    with pytest.raises(ValueError):
        train(build_network(tiny_spec()), tr.subset(0), te, toy_cfg())


def test_nonfinite_gradient_flags_divergence_with_name(toy_data):
    net = build_network(tiny_spec("wa"))
    net.parameters()[0].value[...] = np.nan
    rec = train(net, *toy_data, toy_cfg())
    assert rec.diverged
    assert "loss" in rec.divergence_reason or "layer" in rec.divergence_reason


def test_nonfinite_gradient_diagnostic_names_layer(toy_data, monkeypatch):
    tr, te = toy_data
    net = build_network(tiny_spec("wa"))
    name = net.named_parameters()[0][0]
    real = ag.backward

    def poisoned(loss):
        g = real(loss)
        p = net.named_parameters()[0][1]
        g[p] = np.full_like(p.value, np.inf)
        return g

    monkeypatch.setattr(ag, "backward", poisoned)
    rec = train(net, tr, te, toy_cfg())
    assert rec.diverged
    assert name in rec.divergence_reason


def test_loss_blowup_sets_divergence_flag(toy_data):
    rec = train(build_network(tiny_spec()), *toy_data,
                toy_cfg(epochs=4, divergence_factor=0.0, divergence_patience=2))
    assert rec.diverged
    assert len(rec.epochs) == 2
    assert "consecutive" in rec.divergence_reason


# -- drivers -----------------------------------------------------------------

def test_singleton_sweep_equals_direct_train(toy_data):
    cfg = toy_cfg(batch_size=64)
    (swept,) = sweep_batch(tiny_spec("wa"), *toy_data, [64], cfg)
    direct = train(build_network(tiny_spec("wa")), *toy_data, cfg)
    assert swept.epochs == direct.epochs
    assert swept.initial_loss == direct.initial_loss


def test_bn_batch_one_is_skipped(toy_data):
    recs = sweep_batch(tiny_spec("bn"), *toy_data, [1, 16], toy_cfg(epochs=1))
    assert recs[0].skipped and "batch norm" in recs[0].skip_reason
    assert recs[0].label["batch_size"] == 1
    assert not recs[1].skipped and recs[1].epochs


def test_sweep_rejects_bad_size(toy_data):
    with pytest.raises(ConfigError):
        sweep_batch(tiny_spec("wa"), *toy_data, [0], toy_cfg())


def test_multiplier_one_is_bit_exact(toy_data):
    cfg = toy_cfg()
    (ab,) = ablate_scale(tiny_spec("wa"), *toy_data, [1.0], cfg)
    plain = train(build_network(tiny_spec("wa")), *toy_data, cfg)
    assert ab.epochs == plain.epochs
    assert with_multiplier(tiny_spec("wa"), 1.0).to_dict() == tiny_spec("wa").to_dict()


def test_ablation_requires_wa(toy_data):
    with pytest.raises(ConfigError, match="WeightAlign"):
        ablate_scale(tiny_spec("bn"), *toy_data, [1.0], toy_cfg())


def test_parallel_arms_match_serial(toy_data):
    cfg = toy_cfg(epochs=1)
    serial = sweep_batch(tiny_spec("wa"), *toy_data, [8, 16], cfg, jobs=1)
    parallel = sweep_batch(tiny_spec("wa"), *toy_data, [8, 16], cfg, jobs=2)
    assert [r.epochs for r in serial] == [r.epochs for r in parallel]
