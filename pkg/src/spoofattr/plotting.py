"""Matplotlib figures written next to the delimited report files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes stable between runs
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_confusion(cm, path, title: str = "", normalized: bool = True) -> Path:
    values = cm.normalized() if normalized else cm.counts
    n = len(cm.classes)
    size = max(4.0, 0.55 * n + 2)
    fig, ax = plt.subplots(figsize=(size, size))
    im = ax.imshow(values, cmap="Blues", vmin=0, vmax=1 if normalized else None)
    ax.set_xticks(range(n), cm.classes, rotation=60, ha="right")
    ax.set_yticks(range(n), cm.classes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if n <= 16:
        for i in range(n):
            for j in range(n):
                v = values[i, j]
                if v:
                    ax.text(j, i, f"{v:.2f}" if normalized else str(int(v)), ha="center", va="center",
                            fontsize=7, color="white" if normalized and v > 0.5 else "black")
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_projection(coords: np.ndarray, labels: Sequence[str], path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 5))
    labels = np.asarray(labels)
    for name in sorted(set(labels)):
        sel = labels == name
        ax.scatter(coords[sel, 0], coords[sel, 1], s=6, alpha=0.7, label=name)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.legend(fontsize=7, markerscale=2, loc="best")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_history(history: Sequence[dict], path, metric: str = "dev_macro_f1") -> Path:
    epochs = [h["epoch"] for h in history]
    fig, ax1 = plt.subplots(figsize=(6, 3.5))
    ax1.plot(epochs, [h["train_loss"] for h in history], color="tab:red", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:red")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [h[metric] for h in history], color="tab:blue", label=metric)
    ax2.set_ylabel(metric, color="tab:blue")
    ax2.set_ylim(0, 1.02)
    return _save(fig, path)


def plot_elbow(grid: Sequence[int], inertias: Sequence[float], chosen: int, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(grid, inertias, marker="o")
    ax.axvline(chosen, color="tab:red", linestyle="--", label=f"K={chosen}")
    ax.set_xlabel("K")
    ax.set_ylabel("inertia")
    ax.legend()
    return _save(fig, path)
