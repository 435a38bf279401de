"""Figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLUMN_WIDTH = 3.4  # inches
DPI = 150

STYLE = {
    "font.size": 8,
    "axes.titlesize": 8,
    "axes.labelsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "legend.fontsize": 7,
    "lines.linewidth": 1.2,
    "lines.markersize": 3.5,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.bbox": "tight",
    "savefig.dpi": DPI,
}

QUALITY_LABELS = {"psnr": "PSNR (dB)", "msssim": "MS-SSIM"}


def _figure(height_ratio: float = 0.75):
    return plt.subplots(figsize=(COLUMN_WIDTH, COLUMN_WIDTH * height_ratio))


def plot_rd(curves, path) -> Path:
    """RD curves, one panel per metric."""
    path = Path(path)
    metrics = sorted({c.metric for c in curves})
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(len(metrics), 1),
                                 figsize=(COLUMN_WIDTH * max(len(metrics), 1), COLUMN_WIDTH * 0.75),
                                 squeeze=False)
        for ax, metric in zip(axes[0], metrics):
            for c in curves:
                if c.metric == metric:
                    ax.plot(c.rates, c.qualities, marker="o", label=c.label)
            ax.set_xlabel("bpp")
            ax.set_ylabel(QUALITY_LABELS.get(metric, metric))
            ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_training(history: list[dict], path) -> Path:
    """Loss, distortion and rate per epoch."""
    path = Path(path)
    epochs = [r["epoch"] for r in history]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(2 * COLUMN_WIDTH, COLUMN_WIDTH * 0.7))
        a1.plot(epochs, [r["loss"] for r in history])
        a1.set_xlabel("epoch")
        a1.set_ylabel("loss")
        a2.plot(epochs, [r["rate_bpp"] for r in history], label="bpp")
        a2.set_xlabel("epoch")
        a2.set_ylabel("bpp")
        twin = a2.twinx()
        twin.plot(epochs, [r["distortion_mse"] for r in history], color="C1", label="MSE")
        twin.set_ylabel("MSE")
        twin.grid(False)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_loss_bars(labels: list[str], values: list[float], path, ylabel: str = "RD loss") -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        ax.bar(np.arange(len(values)), values, color=[f"C{i}" for i in range(len(values))])
        ax.set_xticks(np.arange(len(values)), labels, rotation=20)
        ax.set_ylabel(ylabel)
        lo, hi = min(values), max(values)
        pad = 0.5 * (hi - lo) if hi > lo else 0.05 * abs(hi) + 1e-9
        ax.set_ylim(lo - pad, hi + pad)
        fig.savefig(path)
        plt.close(fig)
    return path
