"""Command-line entry points.

    r2vpo train --config run.yaml [--set key=value ...] [--seed N] [--out DIR]
    r2vpo probe-lemma --scales 0.1,0.05,0.025 [--trials N] [--seed N] [--out DIR]
    r2vpo compare --config a.yaml --config b.yaml [--out DIR]
    r2vpo ratio-scatter --checkpoint ckpt.json [--steps N] [--out DIR]

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import config as config_mod
from . import divergence, report
from .config import ConfigError, RunConfig
from .objective import grpo_clip_loss
from .trainer import NumericalAbort, Trainer, build_batch, load_checkpoint, save_checkpoint, to_tuples

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# keys that must agree across configs handed to ``compare``
TASK_MATCH_KEYS = list(config_mod.TASK_KEYS) + ["seed", "group_size", "prompts_per_iteration"]


def _error(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)


def _out_dir(args, rc: RunConfig | None = None) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(rc.out_dir if rc is not None else "runs/out")


def _write_echo(path: Path, rc: RunConfig | None = None, extra: dict | None = None) -> Path:
    doc = rc.to_flat() if rc is not None else {}
    if extra:
        doc.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path


def train_one(rc: RunConfig, out: Path):
    """Run one config into ``out``; returns the RunMetrics."""
    out.mkdir(parents=True, exist_ok=True)
    _write_echo(out / "effective_config.yaml", rc)
    trainer = Trainer(rc.train)
    metrics = trainer.run(checkpoint_dir=out, run_config=rc)
    report.write_metrics_csv(out / "metrics.csv", metrics)
    save_checkpoint(out / "checkpoint.json", trainer, rc)
    return metrics


def cmd_train(args) -> int:
    try:
        rc = config_mod.load(args.config, args.set or [], args.seed)
    except ConfigError as e:
        _error("config", str(e), key=e.key)
        return EXIT_CONFIG
    out = _out_dir(args, rc)
    try:
        metrics = train_one(rc, out)
    except NumericalAbort as e:
        _error("numerical", str(e), dump=e.dump)
        (out / "abort.json").write_text(json.dumps({"message": str(e), "dump": e.dump}, sort_keys=True))
        return EXIT_NUMERIC
    last = metrics.rows[-1] if metrics.rows else None
    summary = {"iterations": len(metrics.rows), "out": str(out)}
    if last is not None:
        summary.update(final_mean_reward=last.mean_reward, final_lambda=last.lam,
                       cumulative_rollouts=last.cumulative_rollouts)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_probe_lemma(args) -> int:
    scales = [float(s) for s in args.scales.split(",")]
    if any(s <= 0 for s in scales):
        _error("config", "scales must be positive", key="scales")
        return EXIT_CONFIG
    out = Path(args.out or "runs/probe_lemma")
    out.mkdir(parents=True, exist_ok=True)
    _write_echo(out / "effective_config.yaml",
                extra={"scales": scales, "trials": args.trials, "seed": args.seed, "vocab_size": args.vocab_size})
    results = divergence.probe_scales(scales, args.trials, args.seed, args.vocab_size)

    rows, summary, pts_x, pts_js, pts_quad = [], [], [], [], []
    for scale, trials in results.items():
        for po, pt, rep in trials:
            rows.append([scale, rep.js_exact, rep.quadratic_estimate, rep.residual, rep.kl_forward, rep.kl_reverse])
        res = np.array([abs(r.residual) for _, _, r in trials])
        js = np.array([r.js_exact for _, _, r in trials])
        summary.append([scale, float(np.median(res)), float(np.median(res / js)), float(np.mean(res <= 0.05 * js))])
    report.write_csv(out / "lemma_probe.csv",
                     ["scale", "js_exact", "quadratic_estimate", "residual", "kl_forward", "kl_reverse"], rows)
    report.write_csv(out / "lemma_summary.csv",
                     ["scale", "median_abs_residual", "median_relative_residual", "fraction_within_5pct"], summary)

    # per-action contributions at the largest scale, against the behaviour probability
    for po, pt, _ in results[max(scales)]:
        rho = pt / po
        m = 0.5 * (pt + po)
        pts_x.extend(po.tolist())
        pts_js.extend((0.5 * pt * np.log(pt / m) + 0.5 * po * np.log(po / m)).tolist())
        pts_quad.extend((po * (rho - 1.0) ** 2 / 8.0).tolist())
    report.scatter_plot(out / "lemma_probe.svg", {"exact JS term": (pts_x, pts_js),
                                                  "(rho-1)^2/8 term": (pts_x, pts_quad)},
                        f"JS vs ratio-variance proxy, scale {max(scales):g}", "pi_off(a)", "contribution",
                        logx=True)
    gen = divergence.js_generator_check()
    print(json.dumps({"generator": gen, "summary": [dict(zip(
        ["scale", "median_abs_residual", "median_relative_residual", "fraction_within_5pct"], s)) for s in summary]},
        sort_keys=True))
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        rcs = [config_mod.load(p, args.set or [], args.seed) for p in args.config]
    except ConfigError as e:
        _error("config", str(e), key=e.key)
        return EXIT_CONFIG
    if len(rcs) < 2:
        _error("config", "compare needs at least two configs")
        return EXIT_CONFIG
    ref = rcs[0].to_flat()
    for rc, path in zip(rcs[1:], args.config[1:]):
        flat = rc.to_flat()
        bad = [k for k in TASK_MATCH_KEYS if flat[k] != ref[k]]
        if bad:
            _error("config", f"{path} does not share task/seed settings with {args.config[0]}", keys=bad)
            return EXIT_CONFIG
    out = Path(args.out or "runs/compare")
    threshold = args.threshold if args.threshold is not None else rcs[0].reward_threshold
    labels = _labels(args.config)
    joint, table, series = [], [], {}
    for rc, label in zip(rcs, labels):
        try:
            metrics = train_one(rc, out / label)
        except NumericalAbort as e:
            _error("numerical", str(e), config=label, dump=e.dump)
            return EXIT_NUMERIC
        for r in metrics.rows:
            joint.append([label, rc.train.algorithm, r.cumulative_rollouts, r.iteration, r.mean_reward])
        hit = metrics.first_crossing("mean_reward", threshold)
        table.append([label, rc.train.algorithm, threshold, report.NOT_REACHED if hit is None else hit])
        series[label] = (metrics.column("cumulative_rollouts").tolist(), metrics.column("mean_reward").tolist())
    joint.sort(key=lambda r: (r[2], labels.index(r[0])))
    report.write_csv(out / "compare.csv", ["label", "algorithm", "cumulative_rollouts", "iteration", "mean_reward"],
                     joint)
    report.write_csv(out / "rollouts_to_threshold.csv", ["label", "algorithm", "threshold", "rollouts_to_threshold"],
                     table)
    report.line_plot(out / "compare.svg", series, "mean reward vs rollouts", "cumulative rollouts", "mean reward",
                     hlines=[threshold])
    _write_echo(out / "effective_config.yaml", extra={"configs": [str(p) for p in args.config],
                                                      "threshold": threshold, "labels": labels})
    print(json.dumps({"rollouts_to_threshold": {r[0]: r[3] for r in table}}, sort_keys=True))
    return EXIT_OK


def _labels(paths) -> list[str]:
    labels = []
    for p in paths:
        base = Path(p).stem
        label, i = base, 1
        while label in labels:
            i += 1
            label = f"{base}_{i}"
        labels.append(label)
    return labels


def ratio_scatter(trainer: Trainer, steps: int) -> dict[str, np.ndarray]:
    """Roll out the checkpointed policy once, take ``steps`` updates on that batch, measure rho per token."""
    behaviour = trainer.state.params
    episodes, adv = trainer.collect()
    items = to_tuples(episodes, adv, trainer.state.iteration)
    for _ in range(steps):
        trainer.gradient_step(items)
    batch = build_batch(behaviour, items)
    pi_off = np.exp(batch.logp_off)
    rep = grpo_clip_loss(batch.evaluated(trainer.state.params), trainer.config.eps_low, trainer.config.eps_high)
    return {"pi_off": pi_off, "rho": rep.ratios, "advantage": batch.advantage, "clipped": rep.clipped_mask}


def cmd_ratio_scatter(args) -> int:
    try:
        trainer, rc = load_checkpoint(args.checkpoint)
    except (OSError, KeyError, ValueError) as e:
        _error("config", f"cannot load checkpoint {args.checkpoint}: {e}")
        return EXIT_CONFIG
    if args.config is not None or args.set:
        # swap in a different task/loss while keeping the checkpointed policy
        try:
            flat = rc.to_flat()
            if args.config is not None:
                flat.update(yaml.safe_load(Path(args.config).read_text()) or {})
            for item in args.set or []:
                k, v = config_mod.parse_override(item)
                flat[k] = v
            rc = config_mod.from_flat(flat).resolved()
        except (ConfigError, OSError) as e:
            _error("config", str(e), key=getattr(e, "key", None))
            return EXIT_CONFIG
        trainer = Trainer(rc.train, trainer.state)
    out = Path(args.out or "runs/ratio_scatter")
    _write_echo(out / "effective_config.yaml", rc, {"checkpoint": str(args.checkpoint), "steps": args.steps})
    try:
        pts = ratio_scatter(trainer, args.steps)
    except NumericalAbort as e:
        _error("numerical", str(e), dump=e.dump)
        return EXIT_NUMERIC
    report.write_csv(out / "ratio_scatter.csv", ["pi_off", "rho", "advantage", "clipped"],
                     zip(pts["pi_off"], pts["rho"], pts["advantage"], pts["clipped"].astype(int)))
    cfg = trainer.config
    inside = ~pts["clipped"]
    report.scatter_plot(out / "ratio_scatter.svg",
                        {"inside band": (pts["pi_off"][inside], pts["rho"][inside]),
                         "clipped": (pts["pi_off"][~inside], pts["rho"][~inside])},
                        "token ratio vs behaviour probability", "pi_off(a)", "rho",
                        hlines=[1 - cfg.eps_low, 1 + cfg.eps_high], logx=True)
    print(json.dumps({"points": int(len(pts["rho"])), "clipped_fraction": float(pts["clipped"].mean())},
                     sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="r2vpo", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("--config", help="flat YAML run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default: out_dir from the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe-lemma", help="exact JS vs ratio-variance probe")
    p.add_argument("--scales", default="0.1,0.05,0.025")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--vocab-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe_lemma)

    p = sub.add_parser("compare", help="run several configs and compare rollouts-to-threshold")
    p.add_argument("--config", action="append", required=True, help="config path (give at least two)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override applied to every config")
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ratio-scatter", help="token ratio vs behaviour probability after an update")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="optional flat YAML overriding the checkpoint's task/loss keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ratio_scatter)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
