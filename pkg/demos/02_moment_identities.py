"""Monte-Carlo checks of the moment identities WeightAlign relies on.

Prints one line per identity.  The Exp x Exp product is a negative control:
it is not symmetric, so it is expected to fail.  Gates are calibrated for the
default 10**6 samples; fewer samples widen them.
"""

# %%
import sys

from weightalign.statlab import default_suite

samples = int(sys.argv[1]) if len(sys.argv) > 1 else 10**6

# %%
for r in default_suite(samples, seed=0, include_controls=True):
    tag = "control" if r.control else ""
    print(f"{'PASS' if r.passed else 'FAIL':4}  {r.name:45} {r.estimate:10.4f} vs {r.target:8.4f}  "
          f"(stderr {r.stderr:.1e}) {tag}")
