"""Figure rendering for run reports (convergence, loss, solution radar)."""

from __future__ import annotations

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def convergence_figure(series, path, title="search convergence"):
    """Best-cost-so-far vs cumulative evaluations, one line per run.

    ``series`` maps a label to a (cum_evals, best_cost) pair of arrays.
    """
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, (evals, best) in series.items():
        evals = np.asarray(evals, dtype=float)
        best = np.asarray(best, dtype=float)
        keep = evals > 0
        ax.plot(evals[keep], best[keep], drawstyle="steps-post", label=label)
    ax.set_xscale("log")
    finite = [b for _, (_, bb) in series.items() for b in np.asarray(bb)
              if np.isfinite(b) and b > 0]
    if finite:
        ax.set_yscale("log")
    ax.set_xlabel("function evaluations")
    ax.set_ylabel("best objective value")
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def training_figure(epochs, losses, bests, path, title="training"):
    """Per-epoch mean loss and best value on twin log axes."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(epochs, losses, label="epoch mean loss")
    ax.plot(epochs, bests, label="best value", linestyle="--")
    if np.all(np.asarray(losses) > 0) and np.all(np.asarray(bests) > 0):
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("objective gap")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def radar_figure(solutions, path, title="best-solution diversity"):
    """Radar chart of solution vectors, one axis per coordinate."""
    solutions = {k: np.asarray(v, dtype=float) for k, v in solutions.items()}
    dims = max(len(v) for v in solutions.values())
    angles = np.linspace(0, 2 * np.pi, dims, endpoint=False)
    angles = np.concatenate([angles, angles[:1]])
    fig = plt.figure(figsize=(5.5, 5.5))
    ax = fig.add_subplot(111, polar=True)
    for label, vec in solutions.items():
        closed = np.concatenate([vec, vec[:1]])
        ax.plot(angles[:len(closed)], closed, linewidth=1.0, label=label)
    ax.set_xticks(angles[:-1])
    ax.set_xticklabels([f"x{i+1}" for i in range(dims)], fontsize=7)
    ax.set_title(title)
    if len(solutions) > 1:
        ax.legend(fontsize=7, loc="upper right", bbox_to_anchor=(1.25, 1.1))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
