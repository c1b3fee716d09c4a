"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_decay(series_by_method: dict, K: int, path) -> Path:
    """Recall@K against sliding-window offset, one line per method."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, series in series_by_method.items():
            ax.plot(series.offsets, [m.recall_at[K] for m in series.metrics], marker="o", label=name)
        ax.set_xlabel("offset (events after the cached history)")
        ax.set_ylabel(f"Recall@{K}")
        ax.legend()
        return _save(fig, path)


def plot_placement(rows, K: int, path) -> Path:
    """Bar chart of Recall@K per expert-placement setting."""
    rows = [r for r in rows if r[1] == K]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(range(len(rows)), [r[2] for r in rows])
        ax.set_xticks(range(len(rows)), [r[0] for r in rows], rotation=30, ha="right", fontsize=7)
        ax.set_ylabel(f"Recall@{K}")
        return _save(fig, path)


def plot_cost(ns, ratios: dict, path) -> Path:
    """Cost ratios against total history length."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, values in ratios.items():
            ax.plot(ns, values, marker=".", label=name)
        ax.set_xlabel("history length n")
        ax.set_ylabel("cost relative to full attention")
        ax.legend()
        return _save(fig, path)


def plot_losses(stats, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(range(1, len(stats.losses) + 1), stats.losses, marker="o")
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        return _save(fig, path)
