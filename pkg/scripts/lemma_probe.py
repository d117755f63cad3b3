"""Exact JS against the quadratic ratio-variance estimate over shrinking perturbation scales.

    python scripts/lemma_probe.py --trials 1000
"""
import argparse

import numpy as np

from r2vpo import divergence


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scales", type=float, nargs="+", default=[0.2, 0.1, 0.05, 0.025, 0.0125])
    ap.add_argument("--trials", type=int, default=1000)
    ap.add_argument("--vocab-size", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    res = divergence.probe_scales(args.scales, args.trials, args.seed, args.vocab_size)
    prev = None
    print(f"{'scale':>8} {'median |res|':>14} {'within 5%':>10} {'KL agree':>9} {'shrink':>7}")
    for scale in args.scales:
        reps = [r for _, _, r in res[scale]]
        med = float(np.median([abs(r.residual) for r in reps]))
        within = np.mean([abs(r.residual) <= 0.05 * r.js_exact for r in reps])
        agree = np.mean([abs(r.kl_forward - r.half_variance) <= 0.1 * r.half_variance
                         and abs(r.kl_reverse - r.half_variance) <= 0.1 * r.half_variance for r in reps])
        shrink = f"{prev / med:7.2f}" if prev else "      -"
        print(f"{scale:8.4f} {med:14.3e} {within:10.3f} {agree:9.3f} {shrink}")
        prev = med
    print("generator check:", divergence.js_generator_check())


if __name__ == "__main__":
    main()
