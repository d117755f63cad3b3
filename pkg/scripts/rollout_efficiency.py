"""Rollouts needed to reach mean reward 0.8 on sequence_sum: GRPO vs off-policy R2VPO.

    python scripts/rollout_efficiency.py --seeds 0 1 2 3 4 --out runs/rollout_efficiency
"""
import argparse
from pathlib import Path

from r2vpo import config, report
from r2vpo.trainer import Trainer

CONFIGS = ["sequence_sum_grpo", "sequence_sum_r2vpo_off", "sequence_sum_r2vpo_on"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--iterations", type=int)
    ap.add_argument("--out", default="runs/rollout_efficiency")
    args = ap.parse_args()
    out = Path(args.out)
    overrides = [f"iterations={args.iterations}"] if args.iterations else []

    rows, curves = [], {}
    for seed in args.seeds:
        for name in CONFIGS:
            rc = config.load(config.shipped_config_path(name), overrides, seed)
            m = Trainer(rc.train).run()
            report.write_metrics_csv(out / f"{name}_seed{seed}.csv", m)
            hit = m.first_crossing("mean_reward", rc.reward_threshold)
            rows.append([seed, name, report.NOT_REACHED if hit is None else hit])
            if seed == args.seeds[0]:
                curves[name] = (m.column("cumulative_rollouts").tolist(), m.column("mean_reward").tolist())
            print(f"seed {seed} {name:<24} rollouts to {rc.reward_threshold}: {rows[-1][2]}")
    report.write_csv(out / "rollouts_to_threshold.csv", ["seed", "config", "rollouts_to_threshold"], rows)
    report.line_plot(out / "reward_vs_rollouts.svg", curves, f"sequence_sum, seed {args.seeds[0]}",
                     "cumulative rollouts", "mean reward", hlines=[0.8])


if __name__ == "__main__":
    main()
