"""SVG learning curves (reward, accuracy, conflicts) from metrics files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# keep SVG output byte-stable across runs
plt.rcParams["svg.hashsalt"] = "fedconflict"
plt.rcParams["svg.fonttype"] = "none"

PANELS = [("reward", "mean reward per server"), ("conflicts", "conflicts per round"),
          ("accuracy", "test accuracy")]


def smooth(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average; NaNs are skipped, window 1 is the identity."""
    values = np.asarray(values, dtype=float)
    if window <= 1 or values.size == 0:
        return values.copy()
    ok = ~np.isnan(values)
    filled = np.where(ok, values, 0.0)
    csum = np.concatenate([[0.0], np.cumsum(filled)])
    ccnt = np.concatenate([[0], np.cumsum(ok)])
    idx = np.arange(values.size)
    lo = np.maximum(0, idx - window + 1)
    cnt = ccnt[idx + 1] - ccnt[lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cnt > 0, (csum[idx + 1] - csum[lo]) / cnt, np.nan)


def plot_curves(series_by_label: dict, out_dir, smooth_window: int = 1) -> list:
    """One SVG per panel; ``series_by_label`` maps a legend label to per-round series."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for key, ylabel in PANELS:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for label in sorted(series_by_label):
            series = series_by_label[label]
            x, y = series["round"], series[key]
            if key == "accuracy":
                keep = ~np.isnan(y)
                x, y = x[keep], y[keep]
                window = max(1, smooth_window // 10)
            else:
                window = smooth_window
            ax.plot(x, smooth(y, window), label=label, linewidth=1.2)
        ax.set_xlabel("round")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        if series_by_label:
            ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        path = out / f"{key}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written
