"""Rare-token bandit: how fast the low-prior eureka token is learned under clipping vs the variance penalty.

    python scripts/eureka_probe.py --seeds 0 1 2 3 4
"""
import argparse
from pathlib import Path

import numpy as np

from r2vpo import config, report
from r2vpo.trainer import Trainer

CONFIGS = ["eureka_grpo", "eureka_r2vpo_on"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="runs/eureka_probe")
    args = ap.parse_args()
    out = Path(args.out)

    rows, curves = [], {}
    for seed in args.seeds:
        for name in CONFIGS:
            rc = config.load(config.shipped_config_path(name), seed=seed)
            m = Trainer(rc.train).run()
            first = next((r.iteration for r in m.rows if r.eureka_prob > 0.5), None)
            clipped = m.column("eureka_clipped_fraction")
            mean_clipped = float(np.nanmean(clipped)) if np.isfinite(clipped).any() else 0.0
            rows.append([seed, name, report.NOT_REACHED if first is None else first, mean_clipped])
            if seed == args.seeds[0]:
                curves[name] = (m.column("iteration").tolist(), m.column("eureka_prob").tolist())
            print(f"seed {seed} {name:<16} iterations to p>0.5: {rows[-1][2]}  eureka clipped {mean_clipped:.3f}")
    report.write_csv(out / "eureka_probe.csv",
                     ["seed", "config", "iterations_to_half", "mean_eureka_clipped_fraction"], rows)
    report.line_plot(out / "eureka_prob.svg", curves, f"eureka token probability, seed {args.seeds[0]}",
                     "iteration", "pi(eureka)", hlines=[0.5])


if __name__ == "__main__":
    main()
