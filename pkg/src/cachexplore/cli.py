"""``cachexplore`` command line."""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import experiment as ex
from .oracle import SearchBudgetExceeded
from .presets import PRESETS


def _configs(args) -> list[ex.ExperimentConfig]:
    cfgs = [ex.load_config(p) for p in args.config or []]
    cfgs += [ex.preset_config(p) for p in args.preset or []]
    if not cfgs:
        raise ex.ConfigFileError("give --config FILE or --preset NAME")
    if args.max_epochs is not None:
        cfgs = [dataclasses.replace(c, hyper=dataclasses.replace(c.hyper, max_epochs=args.max_epochs)) for c in cfgs]
    return cfgs


def _one(args) -> ex.ExperimentConfig:
    cfgs = _configs(args)
    if len(cfgs) != 1:
        raise ex.ConfigFileError(f"{args.verb} takes exactly one config, got {len(cfgs)}")
    return cfgs[0]


def _out(args, cfg: Optional[ex.ExperimentConfig], *parts) -> Path:
    base = Path(args.out) if args.out else Path(cfg.output_dir if cfg else "runs")
    return base.joinpath(*parts)


def cmd_train(args) -> int:
    cfg = _one(args)
    out = Path(args.out) if args.out else _out(args, cfg, cfg.name, args.mode, f"seed{args.seed}")

    def progress(i, stats):
        if not args.quiet:
            print(f"epoch {i:4d}  correct {stats.correct_rate:.3f}  "
                  f"useless {stats.useless_actions}/{stats.total_actions}", flush=True)

    report, row = ex.run_train(cfg, args.mode, args.seed, out, progress=progress)
    status = "converged" if report.converged else "did not converge"
    print(f"{cfg.name} {args.mode} seed {args.seed}: {status} after {report.epochs_run} epochs, "
          f"useless {row['useless_ratio_pct']}%, {row['wall_time_s']} s")
    if report.converged:
        print(f"extracted plans replay accuracy {row['plan_accuracy']}")
    print(f"wrote {out}")
    return 0


def cmd_sweep(args) -> int:
    cfgs = _configs(args)
    out = _out(args, cfgs[0], "sweep")
    summary = ex.run_sweep(cfgs, args.repeats, out, jobs=args.jobs)
    _print_summary(summary)
    print(f"wrote {out}")
    return 0 if all(not r["error"] for r in summary.runs) else 1


def cmd_oracle(args) -> int:
    cfg = _one(args)
    out = Path(args.out) if args.out else None
    try:
        plan, acc = ex.run_oracle(cfg, args.max_len, out)
    except SearchBudgetExceeded as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 2
    if plan is None:
        print(f"no plan found with at most {args.max_len} actions")
        return 1
    print(plan.to_text(), end="")
    print(f"length {len(plan.prefix)}, replay accuracy {acc}")
    return 0


def cmd_replay(args) -> int:
    cfg = _one(args)
    acc = ex.replay_files(cfg, args.plan)
    print(f"replay accuracy {acc}")
    return 0 if acc == 1.0 else 1


def cmd_report(args) -> int:
    path = Path(args.out or "runs")
    runs_csv = path / "sweep_runs.csv" if path.is_dir() else path
    if runs_csv.name == "sweep_runs.csv" and runs_csv.exists():
        summary = ex.summarize(ex.read_runs(runs_csv))
        ex.write_sweep(summary, runs_csv.parent)
        _print_summary(summary)
        return 0
    summary_csv = path / "summary.csv"
    if summary_csv.exists():
        print(summary_csv.read_text(), end="")
        epochs = ex.read_runs(path / "epochs.csv")
        useless = sum(int(r["useless_actions"]) for r in epochs)
        total = sum(int(r["total_actions"]) for r in epochs)
        pct = 100 * useless / total if total else 0.0
        print(f"from epochs.csv: {len(epochs)} epochs, useless ratio {pct:.2f}%")
        return 0
    print(f"no sweep_runs.csv or summary.csv under {path}", file=sys.stderr)
    return 2


def _print_summary(summary: ex.SweepSummary) -> None:
    print(f"{'config':8} {'approach':9} {'runs':>4} {'conv':>4} {'useless%':>9} {'time_s':>9}")
    for r in summary.rows:
        print(f"{r['config']:8} {r['approach']:9} {r['runs']:>4} {r['converged_runs']:>4} "
              f"{r['useless_ratio_pct']:>9} {r['wall_time_s']:>9}")
    for d in summary.derived:
        print(f"{d['config']:8} delta {d['delta_pts'] or '-':>7} pts  time ratio {d['time_ratio'] or '-'}")
    g = summary.geomean_time_ratio
    print(f"geomean time ratio over convergent configs: {'-' if math.isnan(g) else f'{g:.4f}'}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cachexplore", description="Cache attack exploration with RL.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", action="append", help="YAML experiment config (repeatable)")
        p.add_argument("--preset", action="append", choices=sorted(PRESETS, key=lambda n: int(n[2:])),
                       help="benchmark configuration no1..no17")
        p.add_argument("--out", help="output directory")
        p.add_argument("--max-epochs", type=int, help="override hyper.max_epochs")

    p = sub.add_parser("train", help="train one policy")
    common(p)
    p.add_argument("--mode", choices=ex.MODES, default="baseline")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="baseline vs proposal over seeds 0..repeats-1")
    common(p)
    p.add_argument("--repeats", type=int, help="override the config's repeats")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="exhaustive search for a fixed attack plan")
    common(p)
    p.add_argument("--max-len", type=int, default=10)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("replay", help="replay plan files against a config")
    common(p)
    p.add_argument("--plan", nargs="+", required=True, help="plan file(s); several are read as per-secret plans")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("report", help="rebuild sweep summaries or show a run summary")
    p.add_argument("--out", help="sweep or run directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "repeats", None) is not None and args.repeats < 1:
        print("error: --repeats must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ex.ConfigFileError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
