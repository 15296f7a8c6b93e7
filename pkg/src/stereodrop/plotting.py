"""Report figures written next to the CSV outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # a fixed creation date keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curve(history: Sequence[dict], path: str | Path) -> Path:
    steps = [r["step"] for r in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [r["loss_p"] for r in history], label="perceptual")
    ax.plot(steps, [r["loss_total"] for r in history], label="total", linestyle="--")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, path)


def plot_eval_report(report, path: str | Path, baseline=None) -> Path:
    """Per-sample PSNR bars, with the corrupted input alongside when given."""
    names = [r.sample for r in report.rows]
    x = np.arange(len(names))
    vals = [(r.psnr_l + r.psnr_r) / 2 for r in report.rows]
    fig, ax = plt.subplots(figsize=(max(4, 0.35 * len(names) + 2), 3.5))
    width = 0.4 if baseline is not None else 0.8
    ax.bar(x - (width / 2 if baseline is not None else 0), vals, width, label=report.variant or "output")
    if baseline is not None:
        base = [(r.psnr_l + r.psnr_r) / 2 for r in baseline.rows]
        ax.bar(x + width / 2, base, width, label="input")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=90, fontsize=7)
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    return _save(fig, path)


def plot_ablation(summary: dict[str, Sequence[float]], path: str | Path) -> Path:
    """Mean and spread of PSNR per variant across training seeds."""
    names = list(summary)
    means = [float(np.mean(summary[n])) for n in names]
    spread = [float(np.std(summary[n])) for n in names]
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(names) + 2), 3.5))
    ax.bar(names, means, yerr=spread, capsize=4)
    lo = min(m - s for m, s in zip(means, spread))
    ax.set_ylim(lo - 1.0, max(m + s for m, s in zip(means, spread)) + 0.5)
    ax.set_ylabel("PSNR (dB)")
    return _save(fig, path)


def _rgb(img: np.ndarray) -> np.ndarray:
    return np.clip(np.transpose(np.asarray(img), (1, 2, 0)), 0, 1)


def plot_sample_grid(inp_l, out_l, gt_l, disp_l, path: str | Path) -> Path:
    fig, axes = plt.subplots(1, 4, figsize=(12, 2.2))
    for ax, img, title in zip(axes, (inp_l, out_l, gt_l), ("input", "output", "clean")):
        ax.imshow(_rgb(img))
        ax.set_title(title)
    axes[3].imshow(np.asarray(disp_l)[0], cmap="magma")
    axes[3].set_title("disparity")
    for ax in axes:
        ax.axis("off")
    return _save(fig, path)
