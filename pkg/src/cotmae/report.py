"""Render figures next to the delimited outputs of each pipeline stage.

All figures go through the Agg backend so runs work headless; every
function takes the CSV (or rows) a stage already wrote and drops a PNG
alongside it.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_COLUMNS = ["l_smlm_a", "l_cmlm_ab", "l_smlm_b", "l_cmlm_ba", "total"]


def _read_csv(path: str | Path) -> dict[str, list[float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        columns: dict[str, list[float]] = {name: [] for name in reader.fieldnames}
        for row in reader:
            for name, value in row.items():
                columns[name].append(float(value))
    return columns


def render_training_curves(metrics_csv: str | Path, out_png: str | Path | None = None) -> Path:
    """Loss components and the lr schedule from a training metrics file."""
    metrics_csv = Path(metrics_csv)
    out_png = Path(out_png) if out_png else metrics_csv.with_name("loss_curve.png")
    cols = _read_csv(metrics_csv)
    steps = cols["step"]

    fig, (ax_loss, ax_lr) = plt.subplots(
        2, 1, figsize=(7, 6), sharex=True, height_ratios=[3, 1]
    )
    if "total" in cols:  # pre-training breakdown
        for name in LOSS_COLUMNS:
            ax_loss.plot(steps, cols[name], label=name, lw=1.2 if name == "total" else 0.8)
    else:  # fine-tuning has a single loss column
        ax_loss.plot(steps, cols["loss"], label="loss", lw=1.2)
    ax_loss.set_ylabel("loss (nats)")
    ax_loss.legend(fontsize=8, ncol=2)
    ax_loss.grid(alpha=0.3)

    ax_lr.plot(steps, cols["lr"], color="tab:gray")
    ax_lr.set_xlabel("step")
    ax_lr.set_ylabel("lr")
    ax_lr.grid(alpha=0.3)

    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_ablation_chart(rows: list[dict], out_png: str | Path, metric: str = "mrr@10") -> Path:
    """One bar per ablation cell, labeled by its overrides."""
    out_png = Path(out_png)
    labels, values = [], []
    for row in rows:
        label = ", ".join(f"{k.split('.')[-1]}={v}" for k, v in row.items()
                          if k not in ("status", metric) and v != "")
        labels.append(label or "base")
        values.append(float(row[metric]) if row.get("status") == "ok" else 0.0)

    fig, ax = plt.subplots(figsize=(max(6, 1.1 * len(rows)), 4))
    bars = ax.bar(range(len(rows)), values, color="tab:blue")
    for bar, row in zip(bars, rows):
        if row.get("status") != "ok":
            bar.set_color("tab:red")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1.05)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_metric_bars(metrics: dict[str, float], out_png: str | Path) -> Path:
    """Bar chart of an evaluation's metric values."""
    out_png = Path(out_png)
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(metrics), 3.5))
    names = list(metrics)
    ax.bar(names, [metrics[n] for n in names], color="tab:green")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("value")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
