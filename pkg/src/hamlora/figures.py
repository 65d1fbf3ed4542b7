"""Figure rendering for the report path. All figures go to files; nothing
here opens a display."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import numpy as np
import matplotlib.pyplot as plt

from .metrics import AccuracyMatrix


def _save_atomic(fig, path) -> None:
    tmp = f"{path}.tmp"
    fig.savefig(tmp, dpi=150, format="png")
    plt.close(fig)
    os.replace(tmp, path)


def accuracy_matrix_heatmap(matrix: AccuracyMatrix, path) -> None:
    n = matrix.num_tasks
    grid = np.full((len(matrix.rows), n), np.nan)
    for t, row in enumerate(matrix.rows):
        grid[t, : len(row)] = row
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(grid, vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto")
    ax.set_xlabel("task")
    ax.set_ylabel("after training task")
    ax.set_xticks(range(0, n, max(1, n // 10)))
    ax.set_xticklabels(range(1, n + 1, max(1, n // 10)))
    ax.set_yticks(range(0, len(matrix.rows), max(1, n // 10)))
    ax.set_yticklabels(range(1, len(matrix.rows) + 1, max(1, n // 10)))
    fig.colorbar(im, ax=ax, label="accuracy")
    fig.tight_layout()
    _save_atomic(fig, path)


def task_accuracy_curves(matrix: AccuracyMatrix, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    n = matrix.num_tasks
    for i in range(n):
        xs = [t + 1 for t in range(i, len(matrix.rows))]
        ys = [matrix.rows[t][i] for t in range(i, len(matrix.rows))]
        ax.plot(xs, ys, lw=0.8, alpha=0.7)
    mean_seen = [float(np.mean(row)) for row in matrix.rows]
    ax.plot(range(1, len(matrix.rows) + 1), mean_seen, "k-", lw=2, label="mean over seen tasks")
    ax.set_xlabel("after training task")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    _save_atomic(fig, path)


def sweep_curve(param: str, values, accuracies, path) -> None:
    pairs = sorted(zip(values, accuracies))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([p[0] for p in pairs], [p[1] for p in pairs], "o-")
    ax.set_xlabel(param)
    ax.set_ylabel("average accuracy")
    fig.tight_layout()
    _save_atomic(fig, path)
