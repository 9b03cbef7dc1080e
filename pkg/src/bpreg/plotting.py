"""Figure rendering for the report paths (all files, no interactive UI)."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_score_curves(z, unprocessed, cleaned, out_path, title=None):
    """Unprocessed vs cleaned slice scores against height, as a PNG."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(z, unprocessed, ".", color="tab:gray", markersize=4, label="unprocessed slice scores")
    ax.plot(z, cleaned, "-", color="tab:blue", linewidth=1.5, label="cleaned slice scores")
    ax.set_xlabel("height [mm]")
    ax.set_ylabel("slice score")
    if title:
        ax.set_title(title)
    ax.legend(loc="best")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_training_history(history, out_path):
    """Loss curves and validation LMSE over epochs."""
    epochs = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(epochs, [h["train_loss"] for h in history], label="train loss")
    ax1.plot(epochs, [h["val_loss"] for h in history], label="validation loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax1.grid(alpha=0.3)
    lmse_pts = [(h["epoch"], h["val_lmse"]) for h in history if np.isfinite(h["val_lmse"])]
    if lmse_pts:
        ax2.plot(*zip(*lmse_pts), color="tab:red")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation LMSE")
    ax2.set_yscale("log")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_per_landmark_lmse(per_landmark, out_path):
    """Bar chart of per-landmark LMSE with standard-error bars."""
    names = list(per_landmark)
    means = [per_landmark[n][0] for n in names]
    errs = [per_landmark[n][1] for n in names]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(np.arange(len(names)), means, yerr=errs, capsize=3, color="tab:blue")
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel("LMSE")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
