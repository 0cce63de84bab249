"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_loss_trace(trace, path, components=None, window: int = 50, title: str | None = None) -> None:
    """Per-step loss (log scale) with a moving average and optional per-term curves."""
    trace = np.asarray(trace, dtype=float)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    steps = np.arange(trace.size)
    ax.plot(steps, trace, lw=0.6, alpha=0.5, color="0.4", label="total")
    if trace.size >= window:
        ma = np.convolve(trace, np.ones(window) / window, mode="valid")
        ax.plot(steps[window - 1 :], ma, lw=1.5, color="C0", label=f"total ({window}-step mean)")
    if components:
        for i, key in enumerate(components[0]):
            ax.plot(steps, [c[key] for c in components], lw=0.8, color=f"C{i + 1}", label=key)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_per_class(per_class: dict, path, metric: str, title: str | None = None) -> None:
    """Horizontal bar chart of one metric per class."""
    labels = sorted(per_class)
    values = [per_class[k][metric] if isinstance(per_class[k], dict) else per_class[k] for k in labels]
    fig, ax = plt.subplots(figsize=(6.4, 0.35 * len(labels) + 1.2))
    ax.barh(labels, values, color="C0")
    ax.set_xlim(0, 1)
    ax.set_xlabel(metric)
    ax.invert_yaxis()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
