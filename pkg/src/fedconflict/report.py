"""Run summaries and cross-policy comparison tables."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .metrics import MetricsLog, format_value, read_metrics

SUMMARY_COLUMNS = ["policy", "num_servers", "seed", "rounds", "final_reward", "conflicts_per_round",
                   "timeouts_per_round", "accuracy", "fairness_cv", "reward_auc", "config_hash"]
CURVE_COLUMNS = ["policy", "num_servers", "seed", "round", "reward", "conflicts", "accuracy"]


def per_round(log: MetricsLog) -> dict:
    """Collapse per-server rows into per-round series (mean reward, total timeouts, ...)."""
    rounds = {}
    for row in log.rows:
        r = rounds.setdefault(row["round"], {"reward": [], "timeouts": 0, "accuracy": [],
                                             "conflicts": row["round_conflicts"]})
        r["reward"].append(row["reward"])
        r["timeouts"] += row["timeouts"]
        if not math.isnan(row["accuracy"]):
            r["accuracy"].append(row["accuracy"])
    keys = sorted(rounds)
    return {
        "round": np.array(keys, dtype=int),
        "reward": np.array([np.mean(rounds[k]["reward"]) for k in keys]),
        "conflicts": np.array([rounds[k]["conflicts"] for k in keys], dtype=float),
        "timeouts": np.array([rounds[k]["timeouts"] for k in keys], dtype=float),
        "accuracy": np.array([np.mean(rounds[k]["accuracy"]) if rounds[k]["accuracy"] else math.nan
                              for k in keys]),
    }


def participation_cv(log: MetricsLog) -> float:
    """Mean over servers of the coefficient of variation of final participation counts."""
    if not log.rows:
        return math.nan
    last = log.rows[-1]["round"]
    cvs = []
    for row in log.rows:
        if row["round"] != last:
            continue
        counts = np.asarray(row["participation"], dtype=float)
        mean = counts.mean()
        cvs.append(counts.std() / mean if mean > 0 else math.nan)
    return float(np.mean(cvs))


def summarize_run(config: ExperimentConfig, log: MetricsLog, window: int = 200) -> dict:
    series = per_round(log)
    n = series["round"].size
    tail = slice(max(0, n - window), n)
    # final accuracy: mean over the evaluations inside the final window
    acc = series["accuracy"][tail]
    acc = acc[~np.isnan(acc)]
    return {
        "policy": config.policy,
        "num_servers": config.num_servers,
        "seed": config.seed,
        "rounds": n,
        "final_reward": float(series["reward"][tail].mean()) if n else math.nan,
        "conflicts_per_round": float(series["conflicts"][tail].mean()) if n else math.nan,
        "timeouts_per_round": float(series["timeouts"][tail].mean()) if n else math.nan,
        "accuracy": float(acc.mean()) if acc.size else math.nan,
        "fairness_cv": participation_cv(log),
        "reward_auc": float(series["reward"].sum()) if n else 0.0,
        "config_hash": config.config_hash(),
    }


def check_comparable(configs) -> None:
    """Configs may differ only in their policy."""
    if not configs:
        return
    ref = configs[0].topology_key()
    for cfg in configs[1:]:
        key = cfg.topology_key()
        if key != ref:
            diff = sorted(k for k in ref if ref[k] != key.get(k))
            raise ValueError(f"mismatched topologies: configs differ in {diff}")


def compare_policies(runs, window: int = 200) -> tuple[list, list]:
    """Summary rows and per-round curve rows for runs that differ only in policy.

    ``runs`` is a list of ``(ExperimentConfig, MetricsLog)`` pairs.
    """
    check_comparable([cfg for cfg, _ in runs])
    summary, curves = [], []
    for cfg, log in runs:
        summary.append(summarize_run(cfg, log, window))
        series = per_round(log)
        for i, r in enumerate(series["round"]):
            curves.append({"policy": cfg.policy, "num_servers": cfg.num_servers, "seed": cfg.seed,
                           "round": int(r), "reward": float(series["reward"][i]),
                           "conflicts": float(series["conflicts"][i]),
                           "accuracy": float(series["accuracy"][i])})
    return summary, curves


def write_rows(rows, columns, path) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([format_value(row[c]) for c in columns])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def load_run(run_dir) -> tuple[ExperimentConfig, MetricsLog]:
    run_dir = Path(run_dir)
    return load_config(run_dir / "config.yaml"), read_metrics(run_dir / "metrics.csv")


def export_metrics(log: MetricsLog, path, fmt: str = "csv") -> Path:
    return log.export(path, fmt)
