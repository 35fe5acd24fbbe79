"""Figure rendering for run reports: training curves next to metrics.csv,
and cost charts next to the cost table."""

from __future__ import annotations

from pathlib import Path
from typing import List, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt


def save_training_curves(rows, path) -> None:
    """Loss and top-1 over epochs, train and validation side by side."""
    splits = {"train": {}, "val": {}}
    for r in rows:
        splits.setdefault(r.split, {})[r.epoch] = r
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.4))
    for split, style in (("train", "-"), ("val", "--")):
        series = splits.get(split, {})
        if not series:
            continue
        epochs = sorted(series)
        ax_loss.plot(epochs, [series[e].mean_loss for e in epochs], style,
                     label=split)
        ax_acc.plot(epochs, [series[e].top1 for e in epochs], style, label=split)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("cross entropy")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("top-1")
    ax_acc.set_ylim(0, 1)
    for ax in (ax_loss, ax_acc):
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def save_cost_chart(report, path, title: str = "") -> None:
    """Horizontal bars of parameters and multiplies per reported item.

    Network reports can run to dozens of rows; only the heaviest 20 are
    drawn, which is what the chart is for anyway.
    """
    items = sorted(report.items, key=lambda i: i.flops, reverse=True)[:20]
    labels = [i.label for i in items][::-1]
    params = [i.params for i in items][::-1]
    flops = [i.flops for i in items][::-1]
    fig, (ax_p, ax_f) = plt.subplots(1, 2, figsize=(10, 0.35 * len(items) + 1.8),
                                     sharey=True)
    ax_p.barh(labels, params, color="#4878a8")
    ax_p.set_xlabel("parameters")
    ax_f.barh(labels, flops, color="#b05050")
    ax_f.set_xlabel("multiplies")
    for ax in (ax_p, ax_f):
        ax.grid(axis="x", alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def save_experiment_chart(summary: List[dict], path) -> None:
    """Bar chart of final validation top-1 per run configuration."""
    names = [row["name"] for row in summary]
    seen = []
    for n in names:
        if n not in seen:
            seen.append(n)
    fig, ax = plt.subplots(figsize=(1.2 * len(seen) + 2, 3.2))
    for i, name in enumerate(seen):
        vals = [row["top1"] for row in summary if row["name"] == name]
        ax.bar(i, sum(vals) / len(vals), width=0.6, color="#4878a8", zorder=2)
        ax.plot([i] * len(vals), vals, "k.", zorder=3)
    ax.set_xticks(range(len(seen)))
    ax.set_xticklabels(seen, rotation=20, ha="right")
    ax.set_ylabel("val top-1")
    ax.set_ylim(0, 1)
    ax.grid(axis="y", alpha=0.3, zorder=0)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
