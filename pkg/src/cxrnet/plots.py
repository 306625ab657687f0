"""Figure rendering for run artifacts (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import ConfusionMatrix


def save_training_curves(history: list[dict], path: str | Path) -> None:
    """history holds one dict per epoch with train_loss, train_accuracy,
    validation_loss, validation_accuracy."""
    epochs = [h["epoch"] for h in history]
    has_val = all(h.get("validation_loss") is not None for h in history)
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [h["train_loss"] for h in history], label="train")
    if has_val:
        ax_loss.plot(epochs, [h["validation_loss"] for h in history], label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("cross-entropy loss")
    ax_loss.legend()
    ax_acc.plot(epochs, [h["train_accuracy"] for h in history], label="train")
    if has_val:
        ax_acc.plot(epochs, [h["validation_accuracy"] for h in history], label="validation")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0.0, 1.05)
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_confusion_matrix_figure(cm: ConfusionMatrix, path: str | Path) -> None:
    k = len(cm.class_names)
    fig, ax = plt.subplots(figsize=(1.2 * k + 2, 1.2 * k + 1.5))
    im = ax.imshow(cm.counts, cmap="Blues")
    ax.set_xticks(range(k), cm.class_names, rotation=30, ha="right")
    ax.set_yticks(range(k), cm.class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    threshold = cm.counts.max() / 2 if cm.counts.max() else 0
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(int(cm.counts[i, j])), ha="center", va="center",
                    color="white" if cm.counts[i, j] > threshold else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_figure(rows: list[dict], path: str | Path) -> None:
    """rows: dicts with run_label and test_accuracy (None for failed runs)."""
    labels = [r["run_label"] for r in rows]
    values = [r["test_accuracy"] if r["test_accuracy"] is not None else 0.0
              for r in rows]
    failed = [r["test_accuracy"] is None for r in rows]
    fig, ax = plt.subplots(figsize=(max(8, 0.35 * len(rows)), 5))
    colors = ["tab:red" if f else "tab:blue" for f in failed]
    ax.bar(np.arange(len(rows)), values, color=colors)
    ax.set_xticks(np.arange(len(rows)), labels, rotation=90, fontsize=7)
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_comparison_figure(rows: list[dict], path: str | Path) -> None:
    """rows: dicts with architecture and test_accuracy (None for failed runs)."""
    labels = [r["architecture"] for r in rows]
    values = [r["test_accuracy"] if r["test_accuracy"] is not None else 0.0
              for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, values, color="tab:blue")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.05)
    for i, v in enumerate(values):
        ax.text(i, v + 0.01, f"{v:.4f}", ha="center", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
