"""Learned vs random filters and one vs two layers on noisy oriented gratings.

    python3 scripts/synthetic_trend.py --seeds 0 1 2 --noise 0.75
"""
import argparse
import logging
from collections import defaultdict

import numpy as np

from ddsfl.experiments import VARIANTS, run_trend


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--noise", type=float, default=0.75)
    ap.add_argument("--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    accs = defaultdict(list)
    print("seed\tvariant\taccuracy\tseconds")
    for seed in args.seeds:
        for r in run_trend(seed, args.noise):
            accs[r.variant].append(r.accuracy)
            print(f"{r.seed}\t{r.variant}\t{r.accuracy:.4f}\t{r.seconds:.1f}", flush=True)
    print()
    for name in VARIANTS:
        a = np.array(accs[name])
        print(f"{name}\tmean {a.mean():.4f}\tstd {a.std():.4f}")


if __name__ == "__main__":
    main()
