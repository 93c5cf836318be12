"""Report emission: aligned text, CSV, and matplotlib figures side by side.

Every CLI path that produces a report writes the delimited output and a
rendered figure with a shared prefix, so `<prefix>.csv`, `<prefix>.txt`, and
`<prefix>.png` always travel together.
"""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .. import imgio
from .metrics import MetricsReport
from .train import TrainLog


def save_metrics_report(report: MetricsReport, out_prefix: str) -> list[str]:
    """Write <prefix>.txt, <prefix>.csv, and a per-image PSNR/SSIM figure."""
    txt_path = f"{out_prefix}.txt"
    csv_path = f"{out_prefix}.csv"
    fig_path = f"{out_prefix}.png"
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())

    idx = [row["index"] for row in report.rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    if report.rows and report.rows[0]["psnr_noisy"] is not None:
        ax1.bar([i - 0.2 for i in idx], [r["psnr_noisy"] for r in report.rows],
                width=0.4, label="noisy", color="#bbbbbb")
        ax1.bar([i + 0.2 for i in idx], [r["psnr"] for r in report.rows],
                width=0.4, label="denoised", color="#3465a4")
        ax1.legend(fontsize=8)
    else:
        ax1.bar(idx, [r["psnr"] for r in report.rows], color="#3465a4")
    ax1.set_xlabel("image")
    ax1.set_ylabel("PSNR (dB)")
    ax1.set_title(f"mean {report.mean_psnr:.2f} dB, p25 patch {report.patch_psnr_p25:.2f} dB",
                  fontsize=9)
    ax2.plot(idx, [r["ssim"] for r in report.rows], "o-", color="#73d216")
    ax2.set_xlabel("image")
    ax2.set_ylabel("SSIM")
    ax2.set_ylim(0.0, 1.02)
    ax2.set_title(f"mean SSIM {report.mean_ssim:.4f}", fontsize=9)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return [txt_path, csv_path, fig_path]


def save_ablation_report(rows: list[dict], out_prefix: str) -> list[str]:
    """CSV plus a PSNR-and-runtime-versus-radius figure."""
    csv_path = f"{out_prefix}.csv"
    fig_path = f"{out_prefix}.png"
    lines = ["radius,mean_psnr,mean_ssim,seconds"]
    for row in rows:
        lines.append(f"{row['radius']},{row['mean_psnr']:.6f},{row['mean_ssim']:.6f},{row['seconds']:.4f}")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    radii = [row["radius"] for row in rows]
    fig, ax1 = plt.subplots(figsize=(5, 3.2))
    ax1.plot(radii, [row["mean_psnr"] for row in rows], "o-", color="#3465a4")
    ax1.set_xlabel("window radius (px)")
    ax1.set_ylabel("stage-1 PSNR (dB)", color="#3465a4")
    ax2 = ax1.twinx()
    ax2.plot(radii, [row["seconds"] for row in rows], "s--", color="#cc0000")
    ax2.set_ylabel("runtime (s)", color="#cc0000")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return [csv_path, fig_path]


def save_train_log(log: TrainLog, out_prefix: str) -> list[str]:
    """CSV of the loss traces plus a loss-curve figure per phase."""
    csv_path = f"{out_prefix}.csv"
    fig_path = f"{out_prefix}.png"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(log.to_csv())
    phases = [p for p in log.phases if log.phases[p]]
    fig, axes = plt.subplots(1, max(1, len(phases)), figsize=(4 * max(1, len(phases)), 3.0),
                             squeeze=False)
    for ax, phase in zip(axes[0], phases):
        losses = log.losses(phase)
        ax.plot(np.arange(losses.size), losses, lw=0.7, color="#3465a4")
        if losses.size >= 20:  # running mean to make the trend readable
            k = max(5, losses.size // 50)
            kernel = np.ones(k) / k
            ax.plot(np.arange(losses.size - k + 1) + k // 2,
                    np.convolve(losses, kernel, mode="valid"), lw=1.6, color="#cc0000")
        ax.set_yscale("log")
        ax.set_title(phase, fontsize=9)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return [csv_path, fig_path]


def save_score_maps(maps: dict[str, np.ndarray], out_prefix: str) -> list[str]:
    """Grayscale PNG per aggregate plus one annotated composite figure."""
    paths = []
    for name, grid in maps.items():
        path = f"{out_prefix}-{name}.png"
        gray = np.repeat((np.clip(grid, 0.0, 1.0) * 255.0)[:, :, None], 3, axis=2)
        imgio.write_image(gray, path)
        paths.append(path)
    fig_path = f"{out_prefix}.png"
    names = list(maps)
    fig, axes = plt.subplots(1, len(names), figsize=(2.2 * len(names), 2.6), squeeze=False)
    for ax, name in zip(axes[0], names):
        im = ax.imshow(maps[name], vmin=0.0, vmax=1.0, cmap="viridis", interpolation="nearest")
        ax.set_title(name, fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
    fig.savefig(fig_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    paths.append(fig_path)
    return paths
