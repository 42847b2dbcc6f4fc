"""Figures for verify reports and training logs (written to files, never shown)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_report(report, path) -> Path:
    """Per-node observed deviation against the derived bound, log scale.
    Zero deviations get no bar; exact nodes are labelled at the baseline."""
    recs = report.records
    names = [r.node for r in recs]
    err = np.array([r.max_abs_err for r in recs])
    bound = np.array([r.bound for r in recs])
    both = np.concatenate([err, bound])
    positive = both[both > 0]
    floor = float(positive.min()) / 10 if positive.size else 1e-12
    x = np.arange(len(recs))
    fig, ax = plt.subplots(figsize=(max(6.0, 0.55 * len(recs)), 4.0))
    ax.bar(x - 0.2, np.where(bound > 0, bound, np.nan), 0.4, label="bound", color="#9ab")
    ax.bar(x + 0.2, np.where(err > 0, err, np.nan), 0.4, label="max |a - b|", color="#c53")
    ax.set_yscale("log")
    top = float(positive.max()) * 10 if positive.size else 1.0
    ax.set_ylim(floor, top)
    ax.set_xlim(-0.6, len(recs) - 0.4)
    for i, r in enumerate(recs):
        if r.exact and r.max_abs_err == 0:
            ax.annotate("exact", (x[i], floor), xytext=(0, 3), textcoords="offset points",
                        ha="center", va="bottom", fontsize=7, rotation=90)
    ax.set_xticks(x, names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("deviation (real units)")
    verdict = "pass" if report.passed else "FAIL"
    ax.set_title(f"{report.representation_a} vs {report.representation_b}: {verdict}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(history, path) -> Path:
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(6.0, 3.5))
    ax.plot(epochs, [h.loss for h in history], color="#35a", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    ax2 = ax.twinx()
    ax2.plot(epochs, [h.accuracy for h in history], color="#c53", label="train accuracy")
    ax2.set_ylim(0.0, 1.02)
    ax2.set_ylabel("accuracy")
    fig.legend(loc="center right", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
