"""Calibration run behind the frozen drift thresholds in ``weightalign.statlab``.

Runs the untrained drift network over many seeds and prints, per variant, the
distribution of the quantities the thresholds gate on: argmax constancy of the
classifier, the worst |mean|/std over the selected channels, and the max/min
channel std ratio.  Seeds 20..39 are held out from the 0..19 used by the
acceptance test, so the second block shows how the frozen thresholds transfer.

    python tools/calibrate_drift.py [--seeds 40]
"""

import argparse

import numpy as np

from weightalign.statlab import (DRIFT_CONSTANCY, DRIFT_MEAN_RATIO, DRIFT_STD_RATIO,
                                 channel_alignment, drift_experiment)


def summarize(reports):
    mean_ratio = [max(abs(e.mean) / np.sqrt(e.var) for e in r.entries) for r in reports]
    std_ratio = [np.sqrt(max(e.var for e in r.entries) / min(e.var for e in r.entries)) for r in reports]
    return np.array(mean_ratio), np.array(std_ratio)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=40)
    p.add_argument("--batch", type=int, default=128)
    args = p.parse_args()
    res = drift_experiment(("baseline", "wa"), seeds=range(args.seeds), batch=args.batch)
    print(f"thresholds: constancy >= {DRIFT_CONSTANCY}, |mean|/std <= {DRIFT_MEAN_RATIO}, "
          f"std ratio <= {DRIFT_STD_RATIO}")
    for v, d in res.items():
        c = np.array(d["constancy"])
        mr, sr = summarize(d["reports"])
        print(f"\n{v}")
        print(f"  argmax constancy   p10 {np.percentile(c, 10):.3f}  median {np.median(c):.3f}")
        print(f"  worst |mean|/std   median {np.median(mr):.3f}  max {mr.max():.3f}")
        print(f"  std ratio          median {np.median(sr):.2f}  max {sr.max():.2f}")
        aligned = np.array([channel_alignment(r) for r in d["reports"]])
        for lo, hi in ((0, 20), (20, args.seeds)):
            if hi > lo:
                print(f"  seeds {lo}-{hi - 1}: constant {np.mean(c[lo:hi] >= DRIFT_CONSTANCY):.0%}, "
                      f"aligned {aligned[lo:hi].mean():.0%}")


if __name__ == "__main__":
    main()
