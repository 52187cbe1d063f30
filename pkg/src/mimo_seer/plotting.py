"""Optional PNG figures for the CLI's --plot flag.

matplotlib is imported lazily so the rest of the package works without it;
install the ``plot`` extra to enable these.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError("--plot needs matplotlib (pip install 'mimo-seer[plot]')") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    fig.clf()
    return path


def plot_loss(history: Sequence[tuple], path, title: str = "") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([h[0] for h in history], [h[1] for h in history], lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_curves(curves: Dict[str, Sequence[float]], path, ylabel: str = "MSE", xlabel: str = "horizon step") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, values in curves.items():
        ax.plot(range(1, len(values) + 1), values, marker="o", ms=3, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_attention(maps: Dict[str, "object"], path) -> Path:
    """One heatmap per labelled [queries, keys] map, laid out in a row."""
    plt = _pyplot()
    k = max(len(maps), 1)
    fig, axes = plt.subplots(1, k, figsize=(2.6 * k, 2.8), squeeze=False)
    for ax, (label, m) in zip(axes[0], maps.items()):
        ax.imshow(m, cmap="viridis", aspect="auto")
        ax.set_title(label, fontsize=8)
        ax.set_xlabel("key")
        ax.set_ylabel("query")
    out = _save(fig, path)
    plt.close(fig)
    return out
