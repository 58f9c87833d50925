"""WeightAlign on a single conv layer: what it does to the weights and why
the output no longer depends on the rest of the batch."""

# %%
import numpy as np

from weightalign import autograd as ag
from weightalign.layers import apply_variant, build_network, desk_cnn_spec
from weightalign.normalize import weight_align

rng = np.random.default_rng(0)

# %% [markdown]
# Each filter is flattened to its n = c*k*k fan-in values, centered, and
# divided by sqrt(n/2 * var).  The result has mean 0 and variance 2/n, the
# Kaiming scale, whatever the raw weights look like.

# %%
raw = rng.normal(3.0, 0.7, size=(4, 16 * 3 * 3))
w_hat = weight_align(raw).value
n = raw.shape[1]
print("raw mean/var     ", raw.mean(axis=1).round(3), raw.var(axis=1).round(3))
print("aligned mean     ", w_hat.mean(axis=1))
print("aligned n/2 * var", (n / 2 * w_hat.var(axis=1)).round(6))

# %% [markdown]
# Because no activation statistics are involved, a sample's logits are the
# same alone or inside a batch.  Batch norm in train mode mixes samples.

# %%
x = rng.standard_normal((64, 1, 28, 28))
for variant in ("wa", "bn"):
    net = build_network(apply_variant(desk_cnn_spec(), variant))
    with ag.no_grad():
        alone = net.forward(x[:1], train=True).value[0]
        batch = net.forward(x, train=True).value[0]
    print(f"{variant}: max |logit(alone) - logit(in batch)| = {np.abs(alone - batch).max():.2e}")
