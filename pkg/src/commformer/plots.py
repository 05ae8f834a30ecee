"""Matplotlib rendering for run reports: learning curves, adjacency
evolution, and ablation summaries.  All figures are written to files; no
interactive backend is required."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["plot_learning_curves", "plot_adjacency_evolution", "plot_ablation"]


def plot_learning_curves(
    curves: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]],
    out_path: str | Path,
    metrics: tuple[str, ...] = ("mean_return", "success_rate"),
) -> Path:
    """curves: metric -> (env_steps, mean, std)."""
    present = [m for m in metrics if m in curves]
    if not present:
        present = list(curves)[:2]
    fig, axes = plt.subplots(1, len(present), figsize=(5 * len(present), 3.5), squeeze=False)
    for ax, name in zip(axes[0], present):
        steps, mean, std = curves[name]
        ax.plot(steps, mean, lw=1.5)
        ax.fill_between(steps, mean - std, mean + std, alpha=0.25, lw=0)
        ax.set_xlabel("environment steps")
        ax.set_ylabel(name.replace("_", " "))
        ax.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def plot_adjacency_evolution(
    frames: list[tuple[int, np.ndarray]], out_path: str | Path, max_frames: int = 12
) -> Path:
    """frames: list of (env_steps, binary edge matrix), in time order."""
    if not frames:
        raise ValueError("no adjacency frames to plot")
    if len(frames) > max_frames:
        idx = np.linspace(0, len(frames) - 1, max_frames).round().astype(int)
        frames = [frames[i] for i in idx]
    cols = min(6, len(frames))
    rows = (len(frames) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.8 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, (step, edges) in zip(axes.ravel(), frames):
        ax.imshow(edges, cmap="gray_r", vmin=0, vmax=1)
        ax.set_title(f"{step:,}", fontsize=7)
        ax.axis("on")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def plot_ablation(
    cells: list[str], means: np.ndarray, stds: np.ndarray, out_path: str | Path,
    ylabel: str = "mean return",
) -> Path:
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(cells)), 3.5))
    x = np.arange(len(cells))
    ax.bar(x, means, yerr=stds, capsize=3, color="#4878a8")
    ax.set_xticks(x)
    ax.set_xticklabels(cells, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path
