"""The desk-scale MNIST task shared by the training acceptance criteria.

4-conv CNN (``desk_cnn_spec``), MNIST train/test files, 5 epochs of SGD at
lr 0.01 for batch size 64 (linearly rescaled for other sizes).  Runs are
cached per process because several criteria share arms, e.g. the plain WA
run at batch 64 is also the 1x arm of the scale ablation.
"""

import functools
import os
from pathlib import Path

from weightalign.data import load_mnist
from weightalign.layers import apply_variant, build_network, desk_cnn_spec
from weightalign.train import TrainConfig, train, with_multiplier

EPOCHS = 5
BASE_LR = 0.01
BASE_BATCH = 64
SEEDS = (0, 1, 2)


@functools.lru_cache(maxsize=1)
def data():
    return load_mnist(os.environ.get("DATA_ROOT") or Path(__file__).resolve().parents[1] / "data")


def available():
    try:
        data()
    except FileNotFoundError:
        return False
    return True


@functools.lru_cache(maxsize=None)
def run(variant, batch_size=BASE_BATCH, seed=0, multiplier=1.0, center=True, scale=True):
    reparam = {"center": center, "scale": scale} if "wa" in variant else None
    spec = apply_variant(desk_cnn_spec(seed=seed), variant, reparam_overrides=reparam)
    if multiplier != 1.0:
        spec = with_multiplier(spec, multiplier)
    cfg = TrainConfig(epochs=EPOCHS, lr=BASE_LR, seed=seed, base_batch_size=BASE_BATCH).scaled_for(batch_size)
    tr, te = data()
    return train(build_network(spec), tr, te, cfg,
                 {"method": variant, "batch_size": batch_size, "multiplier": multiplier})


def error(rec):
    """Final test error; diverged or unfinished runs count as 100%."""
    e = rec.final_test_error
    return 100.0 if rec.diverged or e is None else e


def cpu_minutes(recs):
    return sum(r.wall_time for r in recs) / 60.0
