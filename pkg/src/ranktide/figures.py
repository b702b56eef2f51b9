"""Report figures rendered to files next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _finish(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training_curves(fold_summaries: list[dict], path) -> None:
    """Per-fold total/ce loss and mean distance spread over epochs."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for s in fold_summaries:
        epochs = [lg["epoch"] for lg in s["epochs"]]
        axes[0].plot(epochs, [lg["total"] for lg in s["epochs"]], alpha=0.7,
                     label=s["held_out_subject"])
        axes[1].plot(epochs, [lg["mean_dbar_std"] for lg in s["epochs"]], alpha=0.7)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("training loss")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("mean std of normalized distances")
    if fold_summaries:
        axes[0].legend(fontsize=6, ncol=2)
    _finish(fig, path)


def plot_confusion(confusion, class_names: list[str], path) -> None:
    conf = np.asarray(confusion, dtype=float)
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(conf, cmap="Blues")
    ax.set_xticks(range(len(class_names)), class_names, rotation=30, ha="right")
    ax.set_yticks(range(len(class_names)), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(conf.shape[0]):
        for j in range(conf.shape[1]):
            ax.text(j, i, int(conf[i, j]), ha="center", va="center", fontsize=8)
    fig.colorbar(im, ax=ax)
    _finish(fig, path)


def plot_alpha_rows(alpha_rows: list[dict], path) -> None:
    """Heatmap of per-sequence segment weights (rows: sequences)."""
    if not alpha_rows:
        return
    mat = np.array([row["alpha"] for row in alpha_rows])
    fig, ax = plt.subplots(figsize=(4, max(2.5, 0.12 * len(alpha_rows))))
    im = ax.imshow(mat, aspect="auto", cmap="viridis", vmin=0.0, vmax=float(mat.max()))
    ax.set_xticks(range(mat.shape[1]), [f"seg {i}" for i in range(mat.shape[1])])
    ax.set_ylabel("sequence")
    fig.colorbar(im, ax=ax, label="weight")
    _finish(fig, path)


def plot_lambda_sweep(rows: list[dict], path) -> None:
    lams = [r["lambda"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(lams, [r["accuracy"] for r in rows], marker="o", label="accuracy")
    ax.plot(lams, [r["macro_f1"] for r in rows], marker="s", label="macro F1")
    if len(lams) > 1 and min(lams) > 0:
        ax.set_xscale("log")
    ax.set_xlabel("trade-off weight")
    ax.set_ylabel("score")
    ax.legend()
    _finish(fig, path)


def plot_ablation(rows: list[dict], path) -> None:
    labels = [f"attn={'on' if r['enable_stma'] else 'off'}\n"
              f"dev={'on' if r['enable_de_loss'] else 'off'}" for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.bar(x - 0.2, [r["accuracy"] for r in rows], width=0.4, label="accuracy")
    ax.bar(x + 0.2, [r["macro_f1"] for r in rows], width=0.4, label="macro F1")
    ax.set_xticks(x, labels, fontsize=8)
    ax.set_ylim(0, 1)
    ax.legend()
    _finish(fig, path)
