"""Figure rendering for reports.

All figures are rendered with the Agg backend at fixed size/DPI and with
PNG metadata stripped, so regenerating a plot from the same report produces
byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_SAVE_KWARGS = {"dpi": 120, "metadata": {"Software": None}}


def _new_fig():
    return plt.figure(figsize=(6.0, 4.0))


def render_loss_curves(histories: dict[str, list[dict]], path: Path) -> Path:
    """One loss-vs-epoch chart; one train/val pair per named history."""
    fig = _new_fig()
    ax = fig.add_subplot(111)
    for name, history in histories.items():
        epochs = [row["epoch"] for row in history]
        ax.plot(epochs, [row["train_loss"] for row in history], label=f"{name} train")
        ax.plot(epochs, [row["val_loss"] for row in history], linestyle="--", label=f"{name} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("Training and validation loss")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    return path


def render_round_dice(rounds: list[dict], path: Path) -> Path:
    """Validation Dice per pseudo-labeling round as a bar chart."""
    fig = _new_fig()
    ax = fig.add_subplot(111)
    labels = [row["label"] for row in rounds]
    values = [row["metrics"]["dice"] * 100.0 for row in rounds]
    ax.bar(range(len(rounds)), values, color="#4878b0")
    ax.set_xticks(range(len(rounds)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("validation Dice (%)")
    ax.set_title("Dice per training round")
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.2f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    return path


def render_fid_bars(fid_rows: list[dict], path: Path) -> Path:
    """Per-class FID of synthetic vs real images as a bar chart."""
    fig = _new_fig()
    ax = fig.add_subplot(111)
    labels = [f"class {row['class_id']}" for row in fid_rows]
    values = [row["value"] for row in fid_rows]
    ax.bar(range(len(values)), values, color="#b04848")
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels)
    ax.set_ylabel("FID (lower is better)")
    ax.set_title("Synthetic image fidelity per class")
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.3g}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    return path
