"""Delimited metric output and aligned text summary tables."""

from __future__ import annotations

import csv
from typing import Dict, List

from eqsense.training import MetricsRecord

__all__ = [
    "METRICS_HEADER",
    "write_metrics_csv",
    "read_metrics_csv",
    "write_train_log_csv",
    "format_eval_table",
    "format_ablation_table",
    "mask_label",
]

METRICS_HEADER = ["image_id", "cs_ratio", "mask", "psnr_db", "ssim", "iters", "seconds"]

TRAIN_LOG_HEADER = [
    "step",
    "epoch",
    "loss",
    "hmse_recon",
    "hmse_sym",
    "hmse_init",
    "psnr_deq",
    "psnr_init",
    "fwd_iterations",
    "fwd_residual",
    "adjoint_converged",
    "seconds",
]


def write_metrics_csv(path, records: List[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow(
                [
                    r.image_id,
                    f"{r.cs_ratio:.6f}",
                    r.mask,
                    f"{r.psnr_db:.6f}",
                    f"{r.ssim:.6f}",
                    r.iterations,
                    f"{r.seconds:.6f}",
                ]
            )


def read_metrics_csv(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_train_log_csv(path, rows: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAIN_LOG_HEADER)
        for row in rows:
            w.writerow([row[k] for k in TRAIN_LOG_HEADER])


def mask_label(mask: str, framing: str = "connected") -> str:
    """Branch label: 'All', 'None', or joined branch numbers.

    The connected framing names the branches that are on; the
    disconnected framing names the ones that are off (and swaps which
    extreme mask reads 'All').
    """
    if framing not in ("connected", "disconnected"):
        raise ValueError(f"unknown framing {framing!r}")
    on = mask if framing == "connected" else "".join("10"[int(b)] for b in mask)
    if on == "1" * len(mask):
        return "All"
    if on == "0" * len(mask):
        return "None"
    return "+".join(str(i + 1) for i, b in enumerate(on) if b == "1")


def _aligned(rows: List[List[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def format_eval_table(summaries: List[dict], algorithm: str = "eqsense") -> str:
    """Mean PSNR (dB) and SSIM per sampling ratio, one column pair each."""
    head1 = ["Algorithm"]
    head2 = [""]
    values = [algorithm]
    for s in summaries:
        head1 += [f"CR={100 * s['cs_ratio']:.4g}%", ""]
        head2 += ["PSNR", "SSIM"]
        values += [f"{s['mean_psnr']:.2f}", f"{s['mean_ssim']:.4f}"]
    return _aligned([head1, head2, values])


def format_ablation_table(summaries: List[dict], framing: str = "connected") -> str:
    """Mean SSIM and PSNR per branch mask, one column per mask.

    Columns are labeled by the connected branches, or by the removed
    ones under the disconnected framing.
    """
    title = "Connected branch" if framing == "connected" else "Disconnected branch"
    head = [title] + [mask_label(s["mask"], framing) for s in summaries]
    ssim_row = ["SSIM"] + [f"{s['mean_ssim']:.4f}" for s in summaries]
    psnr_row = ["PSNR"] + [f"{s['mean_psnr']:.2f}" for s in summaries]
    return _aligned([head, ssim_row, psnr_row])
