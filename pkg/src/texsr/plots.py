"""Matplotlib figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def confusion_figure(stats, path) -> Path:
    """Pairwise-MSE histograms for HR and LR patches plus the own-HR rank histogram."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.6))
    edges = np.asarray(stats.hist_edges)
    centers = 0.5 * (edges[1:] + edges[:-1])
    width = edges[1] - edges[0]
    ax1.bar(centers, stats.hr_hr_hist, width=width, alpha=0.6, label=f"HR-HR (var {stats.hr_hr_mse_var:.2e})")
    ax1.bar(centers, stats.lr_lr_hist, width=width, alpha=0.6, label=f"LR-LR (var {stats.lr_lr_mse_var:.2e})")
    ax1.set_xlabel("pairwise patch MSE")
    ax1.set_ylabel("pairs")
    ax1.legend()
    ranks = np.asarray(stats.own_hr_rank_histogram)
    shown = max(1, min(len(ranks), 50))
    ax2.bar(np.arange(1, shown + 1), ranks[:shown])
    ax2.set_xlabel("rank of own HR patch")
    ax2.set_ylabel("LR patches")
    ax2.set_title(f"mismatch rate {stats.mismatch_rate:.3f}")
    return _save(fig, path)


def loss_curves(history: Sequence[dict], path, terms: Sequence[str] = ("total", "code", "rep_con", "rec_con", "ptpm")) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    offset = 0
    for stage in sorted({r["stage"] for r in history}):
        rows = [r for r in history if r["stage"] == stage]
        x = offset + np.array([r["step"] for r in rows])
        for t in terms:
            y = np.array([r.get(t, np.nan) for r in rows])
            if np.any(y > 0):
                ax.plot(x, y, label=f"s{stage} {t}", lw=1)
        if offset or stage > min(r["stage"] for r in history):
            ax.axvline(offset, color="k", ls=":", lw=0.8)
        offset = int(x.max()) if len(x) else offset
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def codebook_usage(counts: dict[str, np.ndarray], path) -> Path:
    fig, axes = plt.subplots(1, len(counts), figsize=(5 * len(counts), 3.2), squeeze=False)
    for ax, (scale, c) in zip(axes[0], counts.items()):
        c = np.asarray(c)
        ax.bar(np.arange(len(c)), np.sort(c)[::-1], width=1.0)
        ax.set_title(f"{scale}: {int((c > 0).sum())} / {len(c)} used")
        ax.set_xlabel("code (sorted by count)")
        ax.set_ylabel("selections")
    return _save(fig, path)


def embedding_scatter(points: np.ndarray, labels: Sequence[int], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    labels = np.asarray(labels)
    for lab in np.unique(labels):
        m = labels == lab
        ax.scatter(points[m, 0], points[m, 1], s=6, label=str(lab))
    ax.legend(title="label", fontsize=7)
    ax.set_xticks([])
    ax.set_yticks([])
    return _save(fig, path)


def ablation_bars(normal, noisy_runs: Sequence, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    vals = [normal.mean_psnr] + [r.mean_psnr for r in noisy_runs]
    names = ["normal"] + [f"noisy {i}" for i in range(len(noisy_runs))]
    ax.bar(names, vals, color=["C0"] + ["C3"] * len(noisy_runs))
    ax.set_ylabel("mean PSNR (dB)")
    ax.set_ylim(min(vals) - 1.0, max(vals) + 0.5)
    ax.tick_params(axis="x", rotation=30)
    return _save(fig, path)
