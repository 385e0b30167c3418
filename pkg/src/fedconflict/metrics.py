"""Append-only per-(round, server) metrics with stable CSV/JSON layouts.

CSV columns (one row per round and server):

    round            round index, from 1
    task             sequential task index, from 0
    server           server id
    policy           policy kind
    config_hash      hash of the full configuration
    selected         picked client ids, ';'-joined in draw order
    effective        picks that survived conflict resolution
    conflicts        picks lost to another server
    timeouts         surviving picks that missed the latency cap
    round_conflicts  conflict events over all servers this round
    latency          round latency term L (s)
    penalty          conflict/timeout penalty term C
    fairness         fairness term f
    reward           -L - C + alpha * f
    accuracy         test accuracy (nan off evaluation rounds)
    test_loss        test cross-entropy (nan off evaluation rounds)
    global_objective coverage-weighted training loss (nan off evaluation rounds)
    participation    cumulative per-candidate participation, ';'-joined

Floats are written with 17 significant digits so they read back exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

COLUMNS = ["round", "task", "server", "policy", "config_hash", "selected", "effective", "conflicts",
           "timeouts", "round_conflicts", "latency", "penalty", "fairness", "reward", "accuracy",
           "test_loss", "global_objective", "participation"]
INT_COLUMNS = {"round", "task", "server", "conflicts", "timeouts", "round_conflicts"}
FLOAT_COLUMNS = {"latency", "penalty", "fairness", "reward", "accuracy", "test_loss", "global_objective"}
LIST_COLUMNS = {"selected", "effective", "participation"}

DIAG_COLUMNS = ["round", "server", "config_hash", "critic_loss", "actor_loss", "entropy", "temperature_loss",
                "temperature"]
TEXT_COLUMNS = {"policy", "config_hash"}


def format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ";".join(str(int(v)) for v in value)
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def parse_value(column: str, text: str):
    if column in TEXT_COLUMNS:
        return text
    if column in INT_COLUMNS:
        return int(text)
    if column in FLOAT_COLUMNS or column in DIAG_COLUMNS:
        return float(text)
    if column in LIST_COLUMNS:
        return [int(v) for v in text.split(";")] if text else []
    return text


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def open(self, out_dir, config) -> "IncrementalWriter":
        """Start (or restart after a resume) the incremental CSV for this log."""
        writer = IncrementalWriter(Path(out_dir) / "metrics.csv")
        for row in self.rows:
            writer.write(row)
        writer.flush()
        return writer

    def extend(self, rows, writer=None) -> None:
        for row in rows:
            self.rows.append(row)
            if writer is not None:
                writer.write(row)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def export(self, path, fmt: str = "csv") -> Path:
        path = Path(path)
        try:
            if fmt == "csv":
                with open(path, "w", newline="") as fh:
                    writer = csv.writer(fh, lineterminator="\n")
                    writer.writerow(COLUMNS)
                    for row in self.rows:
                        writer.writerow([format_value(row[c]) for c in COLUMNS])
            elif fmt == "json":
                doc = {"columns": COLUMNS, "rows": [[_json_value(row[c]) for c in COLUMNS] for row in self.rows]}
                with open(path, "w") as fh:
                    json.dump(doc, fh)
                    fh.write("\n")
            else:
                raise ValueError(f"unknown export format {fmt!r}")
        except OSError as exc:
            raise OSError(f"cannot write metrics to {path}: {exc}") from exc
        return path

    def export_diagnostics(self, path, config=None) -> Path:
        path = Path(path)
        try:
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(DIAG_COLUMNS)
                digest = config.config_hash() if config is not None else ""
                for row in self.diagnostics:
                    writer.writerow([format_value({**row, "config_hash": digest}[c]) for c in DIAG_COLUMNS])
        except OSError as exc:
            raise OSError(f"cannot write diagnostics to {path}: {exc}") from exc
        return path


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def _from_json(column, v):
    if column in FLOAT_COLUMNS:
        if v is None:
            return math.nan
        return float(v)
    return v


class IncrementalWriter:
    """Appends rows to the metrics CSV as rounds complete."""

    def __init__(self, path: Path):
        self.path = path
        try:
            self._fh = open(path, "w", newline="")
        except OSError as exc:
            raise OSError(f"cannot write metrics to {path}: {exc}") from exc
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(COLUMNS)

    def write(self, row: dict) -> None:
        self._csv.writerow([format_value(row[c]) for c in COLUMNS])

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(path) -> MetricsLog:
    """Load a CSV or JSON export back into a log."""
    path = Path(path)
    try:
        if path.suffix == ".json":
            with open(path) as fh:
                doc = json.load(fh)
            cols = doc["columns"]
            rows = [{c: _from_json(c, v) for c, v in zip(cols, r)} for r in doc["rows"]]
        else:
            with open(path, newline="") as fh:
                rows = [{c: parse_value(c, v) for c, v in r.items()} for r in csv.DictReader(fh)]
    except OSError as exc:
        raise OSError(f"cannot read metrics from {path}: {exc}") from exc
    return MetricsLog(rows)


def read_diagnostics(path) -> list:
    with open(path, newline="") as fh:
        return [{c: parse_value(c, v) for c, v in r.items()} for r in csv.DictReader(fh)]


def round_rows(world, outcome, evals=None) -> list:
    cfg = world.config
    digest = cfg.config_hash()
    rows = []
    for i, (st, sr) in enumerate(zip(world.servers, outcome.servers)):
        rows.append({
            "round": outcome.round_index,
            "task": world.task_index if outcome.round_index else 0,
            "server": sr.server_id,
            "policy": cfg.policy,
            "config_hash": digest,
            "selected": list(sr.selected),
            "effective": list(sr.effective),
            "conflicts": len(sr.conflicts),
            "timeouts": len(sr.timeouts),
            "round_conflicts": outcome.conflict_count,
            "latency": float(sr.latency_term),
            "penalty": float(sr.penalty_term),
            "fairness": float(sr.fairness),
            "reward": float(sr.reward),
            "accuracy": float(evals[0][i]) if evals else math.nan,
            "test_loss": float(evals[1][i]) if evals else math.nan,
            "global_objective": float(evals[2]) if evals else math.nan,
            "participation": [int(v) for v in st.counts],
        })
    return rows


def diagnostics_row(round_index: int, server_id: int, diag: dict) -> dict:
    row = {"round": round_index, "server": server_id}
    for c in DIAG_COLUMNS[3:]:
        row[c] = float(diag[c])
    return row
