"""Figures written next to the text reports."""
from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "axes.labelsize": 11,
    "axes.titlesize": 12,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "legend.fontsize": 9,
    "legend.frameon": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}

# keeps PNG bytes independent of the matplotlib version
_METADATA = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=_METADATA)
    plt.close(fig)


def plot_training(history: Sequence, path) -> None:
    """Training loss (left axis) and validation metrics (right axis) per epoch."""
    epochs = [r.epoch + 1 for r in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, [r.train_loss for r in history], "o-", color="tab:blue", label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train loss")
        ax2 = ax.twinx()
        ax2.plot(epochs, [r.val_precision for r in history], "s--", color="tab:orange", label="val P@20")
        ax2.plot(epochs, [r.val_mrr for r in history], "^--", color="tab:green", label="val MRR@20")
        ax2.set_ylabel("validation metric (%)")
        ax2.spines["right"].set_visible(True)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="center right")
        _save(fig, path)


def plot_ablation(results: Mapping[str, object], path, k: int = 20) -> None:
    """Grouped bars of P@k and MRR@k for each session-representation variant."""
    names = list(results)
    x = np.arange(len(names))
    width = 0.38
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(x - width / 2, [results[n].precision_at_k for n in names], width, label=f"P@{k}")
        ax.bar(x + width / 2, [results[n].mrr_at_k for n in names], width, label=f"MRR@{k}")
        ax.set_xticks(x)
        ax.set_xticklabels([n.replace("_plus_", "+") for n in names])
        ax.set_ylabel("score (%)")
        ax.legend()
        _save(fig, path)


def plot_hit_curve(ranks: np.ndarray, k: int, path) -> None:
    """Hit rate as the cutoff grows from 1 to ``k``."""
    ranks = np.asarray(ranks)
    cutoffs = np.arange(1, k + 1)
    hit = [100.0 * np.mean(ranks <= c) for c in cutoffs]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(cutoffs, hit, "o-", markersize=3)
        ax.set_xlabel("cutoff k")
        ax.set_ylabel("P@k (%)")
        ax.set_ylim(0, 100)
        _save(fig, path)
