"""Report figures written next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_loss_curve(history, path, window=50):
    """Per-step MSE on a log axis with a moving average."""
    steps = np.array([h[0] for h in history])
    loss = np.array([h[2] for h in history])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, loss, lw=0.6, alpha=0.4, label="per step")
    if len(loss) >= window:
        smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
        ax.plot(steps[window - 1:], smooth, lw=1.5, label=f"{window}-step mean")
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("MSE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_evaluation(rows, path):
    """Bar chart of TMQI Q and NIQE per evaluated image."""
    names = [r["image"] for r in rows]
    q = [r["TMQI_Q"] if r["TMQI_Q"] is not None else np.nan for r in rows]
    n = [r["NIQE"] if r["NIQE"] is not None else np.nan for r in rows]
    pos = np.arange(len(rows))
    fig, (left, right) = plt.subplots(1, 2, figsize=(max(6, 1.2 * len(rows) + 3), 4))
    left.bar(pos, q, color="tab:blue")
    left.set_ylim(0, 1)
    left.set_title("TMQI Q (higher is better)")
    right.bar(pos, n, color="tab:orange")
    right.set_title("NIQE (lower is better)")
    for ax in (left, right):
        ax.set_xticks(pos)
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
