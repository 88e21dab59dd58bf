"""Matplotlib renderers for curves, class frequencies, and evaluation reports.

Figures are written next to the delimited outputs (CSV/JSON) so a run
directory is self-describing; nothing here feeds back into training.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .curves import CurvePoint  # noqa: E402


def render_curves(curves: list[CurvePoint], path, title: str = "training") -> None:
    """Loss and accuracy per epoch, train and (when present) validation."""
    epochs = [p.epoch for p in curves]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax_loss.plot(epochs, [p.train_loss for p in curves], label="train", color="tab:blue")
    ax_acc.plot(epochs, [p.train_accuracy for p in curves], label="train", color="tab:blue")
    if any(p.val_loss is not None for p in curves):
        ax_loss.plot(epochs, [p.val_loss for p in curves], label="val", color="tab:orange")
        ax_acc.plot(epochs, [p.val_accuracy for p in curves], label="val", color="tab:orange")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(-0.02, 1.02)
    ax_loss.legend()
    ax_acc.legend()
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def render_class_frequency(counts: dict[int, int], path) -> None:
    """Bar chart of sample count per class id."""
    classes = sorted(counts)
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.bar([str(c) for c in classes], [counts[c] for c in classes], color="tab:blue")
    ax.set_xlabel("class id")
    ax.set_ylabel("images")
    ax.set_title("class frequency")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def render_eval_report(report: dict, path) -> None:
    """BLEU-1..4 and METEOR bars; sweep reports get one bar group per hidden size."""
    rows = report["sweep"] if "sweep" in report else [report]
    labels = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR×100"]
    fig, ax = plt.subplots(figsize=(7, 3.4))
    width = 0.8 / len(rows)
    for k, row in enumerate(rows):
        values = [row["bleu"][str(n)] for n in range(1, 5)] + [row["meteor_x100"]]
        offset = (k - (len(rows) - 1) / 2) * width
        name = f"hidden {row['hidden_size']}" if "hidden_size" in row else "model"
        ax.bar([i + offset for i in range(len(labels))], values, width=width, label=name)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels)
    ax.set_ylabel("score")
    ax.set_ylim(0, 105)
    ax.legend()
    ax.set_title("caption evaluation")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
