"""Figures for the report command: NDCG@m and top-k positive curves, one panel per architecture."""
from __future__ import annotations

from pathlib import Path

import numpy as np

STYLES = {"initial": ("0.6", ":"), "stage-one": ("tab:blue", "--"), "stage-two-direct": ("tab:purple", "-."),
          "stage-two-partial": ("tab:orange", "-"), "stage-two-whole": ("tab:red", "-")}


def plot_curves(curves: dict[tuple[str, str], np.ndarray], labels: dict[tuple[str, str], str],
                xlabel: str, ylabel: str, path: str | Path) -> Path:
    """``curves`` maps (arch, stage) to a series indexed from 1; archs become side-by-side panels."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    archs = sorted({a for a, _ in curves})
    fig, axes = plt.subplots(1, len(archs), figsize=(4.2 * len(archs), 3.4), sharey=True, squeeze=False)
    for ax, arch in zip(axes[0], archs):
        for (a, stage), y in curves.items():
            if a != arch:
                continue
            color, ls = STYLES.get(stage, ("k", "-"))
            ax.plot(np.arange(1, len(y) + 1), y, color=color, ls=ls, lw=1.4, label=labels[(a, stage)])
        ax.set_title(f"FashionNet {arch.upper()}")
        ax.set_xlabel(xlabel)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7, frameon=False)
    axes[0][0].set_ylabel(ylabel)
    fig.tight_layout()
    path = Path(path)
    # fixed metadata so reruns write identical bytes
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path
