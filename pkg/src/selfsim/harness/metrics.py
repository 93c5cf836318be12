"""PSNR, SSIM, and the pooled 25th-percentile patch PSNR.

PSNR uses peak 255 and reports the capped sentinel 100 dB for identical
images.  SSIM follows the classic single-scale formulation with an 11x11
Gaussian window (sigma 1.5), K1=0.01, K2=0.03, evaluated per channel over
the valid interior and averaged.  The patch metric pools the PSNRs of all
non-overlapping 8x8 patches across an evaluation set and takes the lower
quartile (linear interpolation), a worst-case robustness measure.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .. import imgio

PSNR_CAP = 100.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def psnr(reference, image, peak: float = 255.0) -> float:
    """10*log10(peak^2 / MSE); 100 dB sentinel when the images are identical."""
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(image, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return 10.0 * np.log10(peak * peak / mse)


def _gaussian_window() -> np.ndarray:
    half = (_SSIM_WINDOW - 1) / 2.0
    x = np.arange(_SSIM_WINDOW) - half
    g = np.exp(-(x * x) / (2.0 * _SSIM_SIGMA ** 2))
    w = np.outer(g, g)
    return w / w.sum()


_WINDOW = _gaussian_window()


def _filter_valid(plane: np.ndarray) -> np.ndarray:
    """Gaussian-weighted local means over fully-interior windows."""
    from numpy.lib.stride_tricks import sliding_window_view

    windows = sliding_window_view(plane, (_SSIM_WINDOW, _SSIM_WINDOW))
    out = np.empty(windows.shape[:2])
    block = 64  # bound the windowed view materialization
    for r0 in range(0, out.shape[0], block):
        out[r0 : r0 + block] = np.tensordot(windows[r0 : r0 + block], _WINDOW, axes=([2, 3], [0, 1]))
    return out


def ssim(reference, image, peak: float = 255.0) -> float:
    """Mean structural similarity across channels."""
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(image, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < _SSIM_WINDOW or a.shape[1] < _SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} SSIM window")
    c1 = (_K1 * peak) ** 2
    c2 = (_K2 * peak) ** 2
    values = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = _filter_valid(x)
        mu_y = _filter_valid(y)
        var_x = _filter_valid(x * x) - mu_x * mu_x
        var_y = _filter_valid(y * y) - mu_y * mu_y
        cov = _filter_valid(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


def patch_psnrs(reference, image, peak: float = 255.0) -> np.ndarray:
    """PSNR of every non-overlapping 8x8 patch of one image."""
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(image, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    p = imgio.PATCH
    rows = a.shape[0] // p
    cols = a.shape[1] // p
    d = (a - b)[: rows * p, : cols * p]
    d = d.reshape(rows, p, cols, p, -1)
    mse = np.mean(d * d, axis=(1, 3, 4)).ravel()
    out = np.full(mse.shape, PSNR_CAP)
    nz = mse > 0
    out[nz] = 10.0 * np.log10(peak * peak / mse[nz])
    return out


def percentile_25(values: np.ndarray) -> float:
    """Lower quartile with linear interpolation between order statistics."""
    return float(np.percentile(np.asarray(values, dtype=np.float64), 25.0))


@dataclass
class MetricsReport:
    """Per-image rows plus set-level aggregates and stage timings."""

    rows: list  # dicts: index, psnr_noisy, psnr, ssim
    mean_psnr: float
    mean_ssim: float
    mean_psnr_noisy: float
    patch_psnr_p25: float
    timings: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"{'image':>6} {'noisy dB':>9} {'psnr dB':>9} {'ssim':>7}"]
        for row in self.rows:
            noisy = f"{row['psnr_noisy']:9.3f}" if row["psnr_noisy"] is not None else " " * 9
            lines.append(f"{row['index']:>6} {noisy} {row['psnr']:9.3f} {row['ssim']:7.4f}")
        lines.append("")
        if self.rows and self.rows[0]["psnr_noisy"] is not None:
            lines.append(f"mean noisy PSNR : {self.mean_psnr_noisy:.3f} dB")
        lines.append(f"mean PSNR       : {self.mean_psnr:.3f} dB")
        lines.append(f"mean SSIM       : {self.mean_ssim:.4f}")
        lines.append(f"patch PSNR p25  : {self.patch_psnr_p25:.3f} dB")
        for stage, seconds in self.timings.items():
            lines.append(f"time {stage:<11}: {seconds:.2f} s")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["image,psnr_noisy,psnr,ssim"]
        for row in self.rows:
            noisy = "" if row["psnr_noisy"] is None else f"{row['psnr_noisy']:.6f}"
            lines.append(f"{row['index']},{noisy},{row['psnr']:.6f},{row['ssim']:.6f}")
        lines.append(f"mean,{'' if not self.rows or self.rows[0]['psnr_noisy'] is None else f'{self.mean_psnr_noisy:.6f}'},"
                     f"{self.mean_psnr:.6f},{self.mean_ssim:.6f}")
        lines.append(f"patch_psnr_p25,,{self.patch_psnr_p25:.6f},")
        return "\n".join(lines) + "\n"


def evaluate(clean_set, noisy_set, denoised_set, timings: dict | None = None) -> MetricsReport:
    """Metrics over aligned (clean, noisy, denoised) image triples.

    ``noisy_set`` may be None to skip the input-PSNR column.
    """
    n = len(clean_set)
    if len(denoised_set) != n or (noisy_set is not None and len(noisy_set) != n):
        raise ValueError("clean, noisy, and denoised sets must have equal length")
    rows = []
    pooled = []
    for i in range(n):
        clean = np.asarray(clean_set[i], dtype=np.float64)
        den = np.asarray(denoised_set[i], dtype=np.float64)
        if clean.shape != den.shape:
            raise ValueError(f"image {i}: clean {clean.shape} vs denoised {den.shape}")
        row = {
            "index": i,
            "psnr_noisy": None if noisy_set is None else psnr(clean, noisy_set[i]),
            "psnr": psnr(clean, den),
            "ssim": ssim(clean, den),
        }
        rows.append(row)
        pooled.append(patch_psnrs(clean, den))
    report = MetricsReport(
        rows=rows,
        mean_psnr=float(np.mean([r["psnr"] for r in rows])),
        mean_ssim=float(np.mean([r["ssim"] for r in rows])),
        mean_psnr_noisy=(float(np.mean([r["psnr_noisy"] for r in rows]))
                         if noisy_set is not None else float("nan")),
        patch_psnr_p25=percentile_25(np.concatenate(pooled)),
        timings=dict(timings or {}),
    )
    return report


class StageTimer:
    """Wall-clock accumulator for MetricsReport timings."""

    def __init__(self):
        self.totals: dict[str, float] = {}

    def timed(self, stage: str):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.totals[stage] = timer.totals.get(stage, 0.0) + time.perf_counter() - self.t0

        return _Ctx()
