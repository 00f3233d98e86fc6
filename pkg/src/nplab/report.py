"""Figure rendering for the CLI report paths.

Every CSV the CLI emits gets a PNG next to it: predictive bands for export,
validation curves for training runs, and metric-versus-setting lines for
ablations. Rendering uses the Agg backend so it works headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["render_prediction", "render_training_curves", "render_ablation"]


def render_prediction(path, grid_x, mean, std, x_c, y_c, title: str = "") -> Path:
    """Mean line with a +-2 std band and the context points."""
    path = Path(path)
    mean = np.asarray(mean)
    std = np.asarray(std)
    d_y = mean.shape[1] if mean.ndim == 2 else 1
    mean = mean.reshape(len(grid_x), d_y)
    std = std.reshape(len(grid_x), d_y)
    y_c = np.asarray(y_c).reshape(len(x_c), d_y)
    fig, axes = plt.subplots(d_y, 1, figsize=(7, 3 * d_y), squeeze=False, sharex=True)
    for j in range(d_y):
        ax = axes[j, 0]
        ax.plot(grid_x, mean[:, j], color="tab:blue", lw=1.5, label="predictive mean")
        ax.fill_between(grid_x, mean[:, j] - 2 * std[:, j], mean[:, j] + 2 * std[:, j],
                        color="tab:blue", alpha=0.25, label="+-2 std")
        ax.scatter(x_c, y_c[:, j], color="black", s=18, zorder=3, label="context")
        ax.set_ylabel(f"y[{j}]" if d_y > 1 else "y")
        if j == 0:
            ax.legend(loc="best", fontsize=8)
            if title:
                ax.set_title(title)
    axes[-1, 0].set_xlabel("x")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def render_training_curves(path, records, title: str = "") -> Path:
    """Validation log-likelihood and RMSE against epoch."""
    path = Path(path)
    epochs = [r.epoch for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(epochs, [r.loglik for r in records], marker="o", ms=3)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("val log-likelihood")
    ax2.plot(epochs, [r.rmse for r in records], marker="o", ms=3, color="tab:red")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val RMSE")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def render_ablation(path, axis_name: str, values, logliks, stderrs=None,
                    title: str = "") -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = np.arange(len(values))
    yerr = stderrs if stderrs is not None else None
    ax.errorbar(xs, logliks, yerr=yerr, marker="o", capsize=3)
    ax.set_xticks(xs)
    ax.set_xticklabels([str(v) for v in values])
    ax.set_xlabel(axis_name)
    ax.set_ylabel("log-likelihood")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
