"""Matplotlib renderings of evaluation and training artifacts.

Everything draws headlessly (Agg) straight to files; each function returns
the path it wrote.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataset import CLASS_NAMES  # noqa: E402
from .evaluation import CrossValReport  # noqa: E402
from .training import TrainLog  # noqa: E402


def save_confusion_heatmap(confusion: np.ndarray, path: Path | str) -> Path:
    path = Path(path)
    confusion = np.asarray(confusion)
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(confusion, cmap="Blues")
    ax.set_xticks(range(len(CLASS_NAMES)), CLASS_NAMES, rotation=30, ha="right")
    ax.set_yticks(range(len(CLASS_NAMES)), CLASS_NAMES)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    threshold = confusion.max() / 2 if confusion.size else 0
    for i in range(confusion.shape[0]):
        for j in range(confusion.shape[1]):
            ax.text(
                j, i, f"{confusion[i, j]:d}",
                ha="center", va="center",
                color="white" if confusion[i, j] > threshold else "black",
                fontsize=9,
            )
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def save_accuracy_bars(report: CrossValReport, path: Path | str) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    values = [acc * 100 for acc in report.per_class_accuracy]
    bars = ax.bar(CLASS_NAMES, values, color="#4878a8")
    ax.axhline(report.total_accuracy * 100, color="#b04a4a", linestyle="--",
               label=f"total {report.total_accuracy * 100:.2f}%")
    ax.bar_label(bars, fmt="%.2f")
    ax.set_ylabel("success rate (%)")
    ax.set_ylim(0, 105)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def save_training_curves(log: TrainLog, path: Path | str) -> Path:
    path = Path(path)
    epochs = [e.epoch for e in log.entries]
    fig, ax = plt.subplots(figsize=(6, 3.8))
    ax.plot(epochs, [e.train_loss for e in log.entries], marker="o", label="train loss")
    ax.plot(epochs, [e.val_loss for e in log.entries], marker="s", label="val loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    acc_ax = ax.twinx()
    acc_ax.plot(
        epochs, [e.val_acc for e in log.entries],
        marker="^", color="#3a8a4d", label="val accuracy",
    )
    acc_ax.set_ylabel("accuracy")
    acc_ax.set_ylim(0, 1.02)
    handles1, labels1 = ax.get_legend_handles_labels()
    handles2, labels2 = acc_ax.get_legend_handles_labels()
    ax.legend(handles1 + handles2, labels1 + labels2, loc="center right")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
