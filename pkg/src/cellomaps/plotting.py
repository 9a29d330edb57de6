"""Report figures written next to the CSV/JSON outputs.

Uses the Agg canvas directly (no pyplot state), and strips the PNG
software tag so reruns produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .projection import PALETTE
from .tiler import PATTERNS

_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def _new_figure(width: float = 6.0, height: float = 4.0) -> Figure:
    fig = Figure(figsize=(width, height))
    FigureCanvasAgg(fig)
    return fig


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="png", **_SAVE_KW)
    return path


def plot_training_curves(history: Sequence, path) -> Path:
    """Train/val loss on the left axis, validation macro-F1 on the right."""
    fig = _new_figure()
    ax = fig.add_subplot(1, 1, 1)
    epochs = [h.epoch for h in history]
    ax.plot(epochs, [h.train_loss for h in history], "o-", ms=3, label="train loss")
    ax.plot(epochs, [h.val_loss for h in history], "s-", ms=3, label="val loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    f1_ax = ax.twinx()
    f1_ax.plot(epochs, [h.val_macro_f1 for h in history], "k--", lw=1, label="val macro-F1")
    f1_ax.set_ylim(0, 1.02)
    f1_ax.set_ylabel("macro-F1")
    lines = ax.get_lines() + f1_ax.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="center right", fontsize=8)
    return _save(fig, path)


def plot_confusion_matrix(confusion: Sequence[Sequence[int]], path, title: str = "") -> Path:
    cm = np.asarray(confusion, dtype=np.int64)
    names = [p.value for p in PATTERNS][:len(cm)]
    fig = _new_figure(5.5, 4.8)
    ax = fig.add_subplot(1, 1, 1)
    # row-normalised colours, raw counts as text
    rows = cm.sum(axis=1, keepdims=True)
    shade = np.divide(cm, rows, out=np.zeros(cm.shape), where=rows > 0)
    im = ax.imshow(shade, cmap="Blues", vmin=0, vmax=1)
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center", fontsize=8,
                    color="white" if shade[i, j] > 0.6 else "black")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(len(names)), names, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    return _save(fig, path)


def plot_entropy_heatmap(entries: Sequence[tuple[int, int, float]], tile_size: int, path,
                         max_bits: float | None = None) -> Path:
    """Per-tile entropy laid out on the tile grid; missing cells are blank."""
    fig = _new_figure(5.0, 4.2)
    ax = fig.add_subplot(1, 1, 1)
    if entries:
        cols = max(x for x, _, _ in entries) // tile_size + 1
        rows = max(y for _, y, _ in entries) // tile_size + 1
        grid = np.full((rows, cols), np.nan)
        for x, y, h in entries:
            grid[y // tile_size, x // tile_size] = h
        im = ax.imshow(grid, cmap="viridis", vmin=0, vmax=max_bits)
        fig.colorbar(im, ax=ax, label="bits / pixel")
    ax.set_xlabel("tile column")
    ax.set_ylabel("tile row")
    return _save(fig, path)


def plot_pattern_fractions(rows: Sequence[tuple[str, np.ndarray]], path) -> Path:
    """Stacked bar per slide in the overlay palette."""
    fig = _new_figure(max(4.0, 0.5 * len(rows) + 2), 4.0)
    ax = fig.add_subplot(1, 1, 1)
    labels = [r[0] for r in rows]
    fractions = np.array([r[1] for r in rows]).reshape(len(rows), len(PATTERNS))
    bottom = np.zeros(len(rows))
    for k, pattern in enumerate(PATTERNS):
        color = np.array(PALETTE[pattern]) / 255.0
        ax.bar(range(len(rows)), fractions[:, k], bottom=bottom, color=color,
               edgecolor="k", lw=0.3, label=pattern.value)
        bottom += fractions[:, k]
    ax.set_xticks(range(len(rows)), labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_ylabel("fraction of tiles")
    ax.legend(fontsize=7, loc="upper left", bbox_to_anchor=(1.0, 1.0))
    return _save(fig, path)


def plot_tmb_history(history: Sequence[tuple[float, float]], path) -> Path:
    fig = _new_figure(5.0, 3.5)
    ax = fig.add_subplot(1, 1, 1)
    epochs = np.arange(1, len(history) + 1)
    ax.plot(epochs, [h[0] for h in history], label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    acc_ax = ax.twinx()
    acc_ax.plot(epochs, [h[1] for h in history], "k--", lw=1, label="accuracy")
    acc_ax.set_ylim(0, 1.02)
    acc_ax.set_ylabel("training accuracy")
    return _save(fig, path)
