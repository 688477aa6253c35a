"""Report figures written straight to image files (no display needed)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_confusion(cm: np.ndarray, class_names: list[str], path: str | Path, title: str = "Confusion matrix") -> Path:
    cm = np.asarray(cm)
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * len(class_names), 0.8 + 0.7 * len(class_names)))
    ax.imshow(cm, cmap="Blues")
    ticks = np.arange(len(class_names))
    ax.set_xticks(ticks, class_names, rotation=45, ha="right")
    ax.set_yticks(ticks, class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    hi = cm.max() if cm.size else 0
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                    color="white" if hi and cm[i, j] > hi / 2 else "black", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_history(history: list[dict], path: str | Path) -> Path:
    """Training loss on the left, validation scores (if any) on the right."""
    epochs = [r["epoch"] for r in history]
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    keys = [k for k in (history[0]["train_loss"] if history else {}) if k == "total" or k.startswith("ce_")]
    for k in keys:
        left.plot(epochs, [r["train_loss"][k] for r in history], label=k)
    left.set_xlabel("epoch")
    left.set_ylabel("training loss")
    left.legend(fontsize=8)
    if history and "val_weighted_f1" in history[0]:
        right.plot(epochs, [r["val_accuracy"] for r in history], label="accuracy")
        right.plot(epochs, [r["val_weighted_f1"] for r in history], label="weighted F1")
        right.set_ylim(0, 1)
        right.legend(fontsize=8)
    else:
        right.text(0.5, 0.5, "no validation set", ha="center", va="center", transform=right.transAxes)
    right.set_xlabel("epoch")
    right.set_ylabel("validation")
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(summary: list[dict], path: str | Path) -> Path:
    names = [s["variant"] for s in summary]
    means = [s["weighted_f1_mean"] for s in summary]
    stds = [s["weighted_f1_std"] for s in summary]
    fig, ax = plt.subplots(figsize=(1.5 + 0.8 * len(names), 4))
    ax.bar(np.arange(len(names)), means, yerr=stds, capsize=4, color="tab:blue")
    ax.set_xticks(np.arange(len(names)), names, rotation=30, ha="right")
    ax.set_ylabel("test weighted F1")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
