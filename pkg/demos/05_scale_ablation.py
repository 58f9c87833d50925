"""Rescaling the WeightAlign denominator by 0.2, 1, 2, 4 and 100.

Smaller denominators make every layer amplify its input and training blows
up; larger ones shrink the signal until the logits are flat and the loss sits
at log(10).  About five minutes on one core.
"""

# %%
from weightalign.data import load_mnist
from weightalign.layers import apply_variant, desk_cnn_spec
from weightalign.train import TrainConfig, ablate_scale

train_set, test_set = load_mnist()
spec = apply_variant(desk_cnn_spec(), "wa")

# %%
for rec in ablate_scale(spec, train_set, test_set, [0.2, 1, 2, 4, 100], TrainConfig(epochs=5, lr=0.01)):
    losses = [round(e["train_loss"], 3) for e in rec.epochs]
    status = f"diverged ({rec.divergence_reason})" if rec.diverged else f"{rec.final_test_error:.2f}%"
    print(f"x{rec.label['multiplier']:<5g} {status:40} losses {losses}")
