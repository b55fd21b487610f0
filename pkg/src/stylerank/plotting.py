"""Report figures written next to the JSON outputs of the command line.

Uses the object-oriented matplotlib API with the Agg canvas, so nothing here
touches pyplot's global state.
"""

from __future__ import annotations

import functools
from pathlib import Path
from typing import Sequence

import matplotlib as mpl
import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
}


def _styled(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        with mpl.rc_context(RC):
            return func(*args, **kwargs)
    return wrapper


def _new(width: float, height: float) -> Figure:
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    return fig


def savefig(fig: Figure, path, dpi: int = 120) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=dpi, bbox_inches="tight")
    return path


@_styled
def plot_history(history, path) -> Path:
    """Loss curves on the left, validation accuracy / top-K on the right."""
    epochs = [r.epoch for r in history.records]
    fig = _new(7.0, 2.8)
    ax_loss, ax_acc = fig.subplots(1, 2)
    ax_loss.plot(epochs, [r.train_loss for r in history.records], marker="o", ms=3, label="train (with L2)")
    ax_loss.plot(epochs, [r.val_loss for r in history.records], marker="s", ms=3, label="validation")
    if history.records:
        ax_loss.axvline(history.best_epoch, color="0.6", ls="--", lw=0.8, label="best epoch")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("cross-entropy")
    ax_loss.legend(frameon=False)
    ax_acc.plot(epochs, [r.val_accuracy for r in history.records], marker="o", ms=3, label="accuracy")
    ax_acc.plot(epochs, [r.val_top_k for r in history.records], marker="s", ms=3, label="top-K")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("validation")
    ax_acc.legend(frameon=False, loc="lower right")
    for ax in (ax_loss, ax_acc):
        ax.spines[["top", "right"]].set_visible(False)
    return savefig(fig, path)


@_styled
def plot_confusion(confusion: np.ndarray, class_names: Sequence[str], path, title: str = "") -> Path:
    confusion = np.asarray(confusion)
    k = len(class_names)
    fig = _new(1.2 + 0.45 * k, 1.0 + 0.45 * k)
    ax = fig.subplots()
    im = ax.imshow(confusion, cmap="Blues")
    ax.set_xticks(range(k), class_names, rotation=45, ha="right")
    ax.set_yticks(range(k), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title)
    threshold = confusion.max() / 2 if confusion.size else 0
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(confusion[i, j]), ha="center", va="center", fontsize=7,
                    color="white" if confusion[i, j] > threshold else "black")
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    return savefig(fig, path)


@_styled
def plot_class_frequencies(datasets: dict, path) -> Path:
    """One bar chart per labeled dataset, e.g. ``{"category": ds1, "texture": ds2}``."""
    fig = _new(3.2 * len(datasets), 2.6)
    axes = np.atleast_1d(fig.subplots(1, len(datasets)))
    for ax, (name, ds) in zip(axes, datasets.items()):
        counts = np.bincount(ds.labels, minlength=ds.num_classes)
        ax.bar(range(ds.num_classes), counts, color="0.35")
        ax.set_xticks(range(ds.num_classes), ds.class_names, rotation=45, ha="right")
        ax.set_title(name)
        ax.set_ylabel("images")
        ax.spines[["top", "right"]].set_visible(False)
    return savefig(fig, path)


@_styled
def plot_recommendations(rows: Sequence[tuple[np.ndarray, Sequence[tuple[np.ndarray, str]]]], path) -> Path:
    """Query image in the first column, its neighbors (most similar first) to the right.

    ``rows`` holds ``(query_image, [(neighbor_image, caption), ...])`` per query.
    """
    ncols = 1 + max(len(nb) for _, nb in rows)
    fig = _new(1.3 * ncols, 1.45 * len(rows))
    axes = np.array(fig.subplots(len(rows), ncols, squeeze=False))
    for r, (query, neighbors) in enumerate(rows):
        cells = [(query, "query")] + list(neighbors)
        for c in range(ncols):
            ax = axes[r, c]
            ax.set_xticks([])
            ax.set_yticks([])
            if c >= len(cells):
                ax.axis("off")
                continue
            img, caption = cells[c]
            ax.imshow(np.clip(img.squeeze(), 0, 1), cmap="gray" if img.shape[-1] == 1 else None)
            ax.set_title(caption, fontsize=7)
            if c == 0:
                for spine in ax.spines.values():
                    spine.set_edgecolor("tab:red")
                    spine.set_linewidth(1.5)
    return savefig(fig, path)
