"""Command-line entry point: run, sweep, compare, plot."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, PolicyKind, load_config
from .metrics import read_metrics
from .plotting import plot_curves
from .report import CURVE_COLUMNS, SUMMARY_COLUMNS, compare_policies, load_run, per_round, write_rows
from .runner import run_experiment

log = logging.getLogger("fedconflict")


def _int_list(text: str) -> list:
    return [int(v) for v in text.split(",") if v.strip()]


def _str_list(text: str) -> list:
    return [v.strip() for v in text.split(",") if v.strip()]


def _base_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(rounds=getattr(args, "rounds", None))


def _progress(every: int):
    def report(t, outcome):
        if every and t % every == 0:
            log.info("round %d: %d conflicts, %d timeouts", t, outcome.conflict_count, outcome.timeout_count)
    return report


def cmd_run(args) -> int:
    cfg = _base_config(args).with_overrides(seed=args.seed, policy=args.policy)
    out = Path(args.out)
    metrics = run_experiment(cfg, out, resume=args.resume, progress=_progress(args.log_every))
    if args.format == "json":
        metrics.export(out / "metrics.json", "json")
    print(f"{len(metrics)} rows -> {out / 'metrics.csv'} (config {cfg.config_hash()})")
    return 0


def cmd_sweep(args) -> int:
    base = _base_config(args)
    out = Path(args.out)
    policies = _str_list(args.policies)
    for p in policies:
        PolicyKind(p)
    for m in _int_list(args.servers):
        for seed in _int_list(args.seeds):
            runs = []
            for p in policies:
                cfg = base.with_overrides(num_servers=m, seed=seed, policy=p)
                run_dir = out / f"m{m}" / f"seed{seed}" / p
                log.info("running %s", run_dir)
                runs.append((cfg, run_experiment(cfg, run_dir, resume=args.resume,
                                                 progress=_progress(args.log_every))))
            summary, curves = compare_policies(runs, args.window)
            write_rows(summary, SUMMARY_COLUMNS, out / f"m{m}" / f"seed{seed}" / "comparison.csv")
    _sweep_table(out)
    return 0


def _sweep_table(out: Path) -> None:
    rows = []
    for path in sorted(out.glob("m*/seed*/comparison.csv")):
        with open(path, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    if rows:
        with open(out / "sweep.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)


def cmd_compare(args) -> int:
    runs = [load_run(d) for d in args.runs]
    summary, curves = compare_policies(runs, args.window)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(summary, SUMMARY_COLUMNS, out / "comparison.csv")
    write_rows(curves, CURVE_COLUMNS, out / "curves.csv")
    series = {f"{cfg.policy} (seed {cfg.seed})": per_round(m) for cfg, m in runs}
    plot_curves(series, out, args.smooth)
    for row in summary:
        print(f"{row['policy']:>20}  conflicts/round {row['conflicts_per_round']:.3f}  "
              f"reward {row['final_reward']:.2f}  accuracy {row['accuracy']:.3f}")
    return 0


def cmd_plot(args) -> int:
    series = {}
    for path in args.metrics:
        path = Path(path)
        label = path.parent.name or path.stem
        series[label] = per_round(read_metrics(path))
    for p in plot_curves(series, args.out, args.smooth):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedconflict",
                                     description="Conflict-aware client selection for multi-server federated learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config (defaults used when omitted)")
        p.add_argument("--rounds", type=int, help="rounds per task")
        p.add_argument("--resume", action="store_true", help="continue from checkpoint.pkl if present")
        p.add_argument("--log-every", type=int, default=100)

    run = sub.add_parser("run", help="run one experiment")
    common(run)
    run.add_argument("--seed", type=int)
    run.add_argument("--policy", choices=[k.value for k in PolicyKind])
    run.add_argument("--out", required=True)
    run.add_argument("--format", choices=["csv", "json"], default="csv",
                     help="json also writes metrics.json next to the CSV")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="run every policy across server counts and seeds")
    common(sweep)
    sweep.add_argument("--servers", default="2,3,4")
    sweep.add_argument("--seeds", default="0")
    sweep.add_argument("--policies", default=",".join(k.value for k in PolicyKind))
    sweep.add_argument("--window", type=int, default=200)
    sweep.add_argument("--out", required=True)
    sweep.set_defaults(func=cmd_sweep)

    compare = sub.add_parser("compare", help="tabulate and plot finished runs")
    compare.add_argument("--runs", nargs="+", required=True)
    compare.add_argument("--out", required=True)
    compare.add_argument("--window", type=int, default=200)
    compare.add_argument("--smooth", type=int, default=1)
    compare.set_defaults(func=cmd_compare)

    plot = sub.add_parser("plot", help="SVG curves from metrics CSV files")
    plot.add_argument("--metrics", nargs="+", required=True)
    plot.add_argument("--out", required=True)
    plot.add_argument("--smooth", type=int, default=1, help="moving-average window in rounds")
    plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
