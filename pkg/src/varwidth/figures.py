"""Matplotlib rendering of scan results next to their CSV outputs.

PNGs are written without the Software metadata chunk so that identical data
produces identical bytes across reruns.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update({
    "figure.figsize": (5.2, 3.6),
    "figure.dpi": 130,
    "savefig.dpi": 130,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
})

_SPLIT_STYLE = {"train": dict(color="tab:blue", marker="o"),
                "test": dict(color="tab:orange", marker="s")}


def _save(fig, path) -> None:
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def scan_figure(path, summary_rows, fit=None, xlabel="stochastic layer width") -> None:
    """Log-log width vs mean variance per split, with the fitted tail line."""
    fig, ax = plt.subplots()
    by_split: dict[str, list[tuple[int, float]]] = {}
    for width, split, mean_var in summary_rows:
        by_split.setdefault(split, []).append((width, mean_var))
    for split, rows in sorted(by_split.items()):
        rows.sort()
        ws = [w for w, _ in rows]
        vs = [v for _, v in rows]
        ax.loglog(ws, vs, label=split, **_SPLIT_STYLE.get(split, {}))
    if fit is not None:
        ws = np.asarray(fit.window, dtype=float)
        ax.loglog(ws, np.exp(fit.intercept) * ws ** fit.exponent, "k--",
                  label=f"tail fit: slope {fit.exponent:.2f}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("mean prediction variance")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def illustrate_figure(path, grid_x, samples, data_x, data_y, width, max_curves=120) -> None:
    """Sampled prediction curves over the input grid, with the training points."""
    fig, ax = plt.subplots()
    n = min(max_curves, samples.shape[0])
    for i in range(n):
        ax.plot(grid_x, samples[i], color="tab:blue", alpha=0.05, linewidth=0.8)
    ax.scatter(data_x, data_y, s=8, color="tab:red", zorder=3, label="training data")
    ax.set_title(f"width {width}")
    ax.set_xlabel("x")
    ax.set_ylabel("sampled prediction")
    ax.set_ylim(-2.0, 2.0)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def lift_figure(path, mode, ks, measured, predicted=None, ylabel="mean output variance") -> None:
    """Variance against the copy count k, with the analytic prediction when available."""
    fig, ax = plt.subplots()
    ax.loglog(ks, measured, "o-", color="tab:blue", label="measured")
    if predicted is not None:
        ax.loglog(ks, predicted, "k--", label="predicted")
    ax.set_xlabel("copy count k")
    ax.set_ylabel(ylabel)
    ax.set_title(f"{mode} lift")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
