"""SVG line charts of training metrics: front-end distance and dev WER against update."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .adapter import read_metrics  # noqa: E402


def _series(rows: list[dict], key: str) -> tuple[list[int], list[float]]:
    xs, ys = [], []
    for row in rows:
        value = row.get(key, "")
        if value not in ("", None):
            xs.append(int(row["step"]))
            ys.append(float(value))
    return xs, ys


def plot_runs(csv_paths: Sequence[str | Path], labels: Sequence[str], out_path: str | Path, n_warmup: int | None = None) -> Path:
    """Two panels sharing the update axis: probe distance (top) and dev WER (bottom)."""
    if len(labels) != len(csv_paths):
        raise ValueError(f"{len(csv_paths)} metrics files but {len(labels)} labels")
    plt.rcParams["svg.fonttype"] = "none"  # keep text as text so series labels stay searchable
    fig, (ax_d, ax_w) = plt.subplots(2, 1, figsize=(6.4, 6.4), sharex=True)
    for path, label in zip(csv_paths, labels):
        rows = read_metrics(path)
        xs, ys = _series(rows, "frontend_l2")
        if xs:
            ax_d.plot(xs, ys, label=label)
        xs, ys = _series(rows, "dev_wer")
        if xs:
            ax_w.plot(xs, ys, marker="o", markersize=3, label=label)
    if n_warmup:
        for ax in (ax_d, ax_w):
            ax.axvline(n_warmup, color="grey", linestyle="--", linewidth=0.8)
    ax_d.set_ylabel("front-end distance")
    ax_w.set_ylabel("dev WER (%)")
    ax_w.set_xlabel("update")
    for ax in (ax_d, ax_w):
        if ax.get_legend_handles_labels()[0]:
            ax.legend()
        ax.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return out_path
