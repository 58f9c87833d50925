"""Batch norm vs WeightAlign across batch sizes 64, 8 and 2 on MNIST.

Five epochs per arm, lr 0.01 at batch 64, scaled linearly.  Expect about
six minutes on one core.  Needs the MNIST IDX files under $DATA_ROOT (or
./data).
"""

# %%
from weightalign.data import load_mnist
from weightalign.layers import apply_variant, desk_cnn_spec
from weightalign.train import TrainConfig, sweep_batch

train_set, test_set = load_mnist()
cfg = TrainConfig(epochs=5, lr=0.01)

# %%
for method in ("bn", "wa"):
    spec = apply_variant(desk_cnn_spec(), method)
    for rec in sweep_batch(spec, train_set, test_set, [64, 8, 2], cfg, {"method": method}):
        print(f"{method} bs={rec.label['batch_size']:>2}  test error {rec.final_test_error:.2f}%")
