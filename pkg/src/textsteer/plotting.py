"""Matplotlib figures written next to the CSV/JSON reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_META = {"Software": None}


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_loss(path: str, losses, window: int = 50) -> str:
    losses = np.asarray(losses, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(np.arange(1, len(losses) + 1), losses, lw=0.6, alpha=0.4, label="step")
    if len(losses) >= window:
        smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
        ax.plot(np.arange(window, len(losses) + 1), smooth, lw=1.5, label=f"mean of {window}")
    ax.set_xlabel("step")
    ax.set_ylabel("soft cross-entropy")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_omega_sweep(path: str, rows: list[dict]) -> str:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    x = [r["quality"] for r in rows]
    y = [r["steerability"] for r in rows]
    ax.plot(x, y, "o-")
    for r in rows:
        ax.annotate(f"{r['omega']:.1f}", (r["quality"], r["steerability"]), textcoords="offset points",
                    xytext=(4, 4), fontsize=8)
    ax.set_xlabel("probe accuracy")
    ax.set_ylabel("retrieval acc@1")
    return _save(fig, path)


def plot_divergence(path: str, profile) -> str:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(range(len(profile)), profile, "o-")
    ax.set_xlabel("layer (0 = embedding)")
    ax.set_ylabel("1 - cos(steered, base)")
    return _save(fig, path)


def plot_heatmaps(path: str, image: np.ndarray, maps: dict) -> str:
    """Image followed by one heatmap panel per entry of ``maps``."""
    n = 1 + len(maps)
    fig, axes = plt.subplots(1, n, figsize=(2.4 * n, 2.6))
    axes[0].imshow(np.clip(image, 0, 1))
    axes[0].set_title("image", fontsize=8)
    for ax, (title, heat) in zip(axes[1:], maps.items()):
        ax.imshow(np.clip(image, 0, 1))
        ax.imshow(heat, cmap="inferno", alpha=0.6, vmin=0, vmax=1)
        ax.set_title(title, fontsize=8)
    for ax in axes:
        ax.axis("off")
    return _save(fig, path)
