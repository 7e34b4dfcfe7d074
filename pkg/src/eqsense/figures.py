"""Figure rendering for the report paths.

Every command that writes delimited output also drops a PNG next to it;
these helpers own the plotting so the CLI stays thin. The Agg backend
keeps everything headless.
"""

from __future__ import annotations

from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from eqsense.reporting import mask_label

__all__ = [
    "sibling_figure_path",
    "save_loss_curve",
    "save_eval_chart",
    "save_ablation_chart",
    "save_residual_trace",
]


def sibling_figure_path(out_path, suffix: str) -> Path:
    p = Path(out_path)
    return p.with_name(f"{p.stem}_{suffix}.png")


def save_loss_curve(rows: List[dict], path) -> Path:
    steps = [r["step"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.semilogy(steps, [r["loss"] for r in rows], lw=1.0, label="total")
    ax1.semilogy(steps, [r["hmse_sym"] for r in rows], lw=1.0, label="consistency")
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend(frameon=False, fontsize=8)
    ax2.plot(steps, [r["psnr_deq"] for r in rows], lw=1.0, label="equilibrium")
    ax2.plot(steps, [r["psnr_init"] for r in rows], lw=1.0, label="initial")
    ax2.set_xlabel("step")
    ax2.set_ylabel("train PSNR (dB)")
    ax2.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_eval_chart(summaries: List[dict], path) -> Path:
    ratios = [100 * s["cs_ratio"] for s in summaries]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.plot(ratios, [s["mean_psnr"] for s in summaries], "o-")
    ax1.set_xlabel("CS ratio (%)")
    ax1.set_ylabel("mean PSNR (dB)")
    ax2.plot(ratios, [s["mean_ssim"] for s in summaries], "o-")
    ax2.set_xlabel("CS ratio (%)")
    ax2.set_ylabel("mean SSIM")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_ablation_chart(summaries: List[dict], path) -> Path:
    labels = [mask_label(s["mask"]) for s in summaries]
    psnrs = [s["mean_psnr"] for s in summaries]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.8 * len(labels)), 3.2))
    ax.bar(range(len(labels)), psnrs, color="#4878a8")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("mean PSNR (dB)")
    ax.set_xlabel("connected branches")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_residual_trace(trace: List[float], path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.semilogy(range(1, len(trace) + 1), trace, "o-", ms=3)
    ax.set_xlabel("iteration")
    ax.set_ylabel("relative residual")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
