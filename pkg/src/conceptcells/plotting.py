"""Figures rendered from exported CSV files (headless matplotlib)."""
from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import read_csv  # noqa: E402


def _grid(path: str) -> tuple[list[str], np.ndarray]:
    header, rows = read_csv(path)
    data = np.array([[float(v) if v != "" else np.nan for v in r[1:]] for r in rows]).reshape(len(rows), -1)
    return header[1:], data


def _heatmap(ax, data: np.ndarray, xlabels, ylabel: str, title: str) -> None:
    im = ax.imshow(np.ma.masked_invalid(data), vmin=0, vmax=1, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(xlabels)))
    ax.set_xticklabels(xlabels, rotation=45, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if data.size <= 100:
        for (i, j), v in np.ndenumerate(data):
            if not np.isnan(v):
                ax.text(j, i, f"{100 * v:.0f}", ha="center", va="center", fontsize=7, color="w")
    plt.colorbar(im, ax=ax)


def plot_run(run_dir: str) -> list[str]:
    """Render curve.png, matrix.png and cells.png next to the run's CSV files."""
    written = []
    curve = os.path.join(run_dir, "curve.csv")
    if os.path.exists(curve):
        _, rows = read_csv(curve)
        xs = [int(r[0]) for r in rows]
        ys = [100 * float(r[1]) if r[1] else np.nan for r in rows]
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel("streams trained")
        ax.set_ylabel("average accuracy [%]")
        ax.set_ylim(0, 100)
        ax.set_xticks(xs)
        fig.tight_layout()
        written.append(_save(fig, run_dir, "curve.png"))
    for name, ylabel, title in (("matrix.csv", "after stream", "stream accuracy"),
                                ("cells_matrix.csv", "cell", "per-cell accuracy")):
        path = os.path.join(run_dir, name)
        if not os.path.exists(path):
            continue
        labels, data = _grid(path)
        if data.size == 0:
            continue
        fig, ax = plt.subplots(figsize=(5, max(2.5, 0.25 * data.shape[0] + 1.5)))
        _heatmap(ax, data, labels, ylabel, title)
        fig.tight_layout()
        written.append(_save(fig, run_dir, name.replace(".csv", ".png").replace("cells_matrix", "cells")))
    return written


def plot_comparison(rows: Sequence[dict], path: str) -> str:
    labels = [f"{r['method']}\n{r['scenario']}" for r in rows]
    vals = [100 * r["avg_acc"] if r["avg_acc"] is not None else 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(rows) + 1), 3.2))
    ax.bar(range(len(rows)), vals)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("average accuracy [%]")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(rows: Sequence[dict], keys: Sequence[str], path: str) -> str:
    """One bar per grid combination, labelled by the swept values."""
    labels = ["\n".join(f"{k}={r[k]}" for k in keys) for r in rows]
    vals = [100 * r["avg_accuracy"] if r.get("avg_accuracy") is not None else 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 0.7 * len(rows) + 1), 3.6))
    ax.bar(range(len(rows)), vals)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=6)
    ax.set_ylabel("average accuracy [%]")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _save(fig, run_dir: str, name: str) -> str:
    path = os.path.join(run_dir, name)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
