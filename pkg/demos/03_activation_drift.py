"""Untrained 8-layer network fed standard-normal inputs.

Without normalization the per-channel means of a deep layer wander away from
zero and the classifier tends to predict one class for the whole batch.  With
WeightAlign the selected channels stay centered and similarly scaled.
"""

# %%
import numpy as np

from weightalign.statlab import DRIFT_LAYER, drift_trial

# %%
for variant in ("baseline", "wa"):
    rep = drift_trial(variant, seed=0)
    print(f"\n{variant}: argmax constancy {rep.argmax_constancy:.2f}")
    for e in rep.select(layer=str(DRIFT_LAYER)):
        std = np.sqrt(e.var)
        print(f"  channel {e.channel}: mean {e.mean:+.3f}  std {std:.3f}  |mean|/std {abs(e.mean) / std:.2f}")
