"""Evaluation metrics and the metrics CSV row format."""

from __future__ import annotations

import numpy as np
from skimage.metrics import structural_similarity

__all__ = [
    "psnr",
    "ssim",
    "quality_metrics",
    "METRICS_HEADER",
    "format_metrics_row",
    "PSNR_CSV_CAP",
]

METRICS_HEADER = "step,split,psnr_db,ssim,charbonnier,fft,total"
PSNR_CSV_CAP = 99.0


def _check(restored: np.ndarray, truth: np.ndarray, peak: float) -> None:
    if restored.shape != truth.shape:
        raise ValueError(
            f"restored shape {restored.shape} does not match truth {truth.shape}"
        )
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")


def psnr(restored: np.ndarray, truth: np.ndarray, peak: float = 1.0) -> float:
    """Per-frame 10*log10(peak^2/MSE), averaged; +inf when all frames match."""
    _check(restored, truth, peak)
    values = []
    for r, g in zip(restored, truth):
        mse = float(np.mean((r - g) ** 2))
        values.append(np.inf if mse == 0 else 10.0 * np.log10(peak * peak / mse))
    return float(np.mean(values))


def ssim(restored: np.ndarray, truth: np.ndarray, peak: float = 1.0) -> float:
    """Windowed structural similarity (11x11 Gaussian, sigma 1.5), frame mean."""
    _check(restored, truth, peak)
    # frames below the default 11x11 window fall back to the largest odd fit
    extent = min(restored.shape[1], restored.shape[2])
    win = min(11, extent if extent % 2 else extent - 1)
    if win < 3:
        raise ValueError(f"frames too small for ssim: {restored.shape}")
    values = [
        structural_similarity(
            g,
            r,
            data_range=peak,
            channel_axis=-1,
            win_size=win,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            K1=0.01,
            K2=0.03,
        )
        for r, g in zip(restored, truth)
    ]
    return float(np.mean(values))


def quality_metrics(
    restored: np.ndarray, truth: np.ndarray, peak: float = 1.0
) -> dict[str, float]:
    return {
        "psnr": psnr(restored, truth, peak),
        "ssim": ssim(restored, truth, peak),
    }


def format_metrics_row(
    step: int,
    split: str,
    psnr_db: float,
    ssim_value: float,
    charbonnier: float,
    fft: float,
    total: float,
) -> str:
    """One CSV row; the PSNR +inf sentinel is capped for the log."""
    capped = min(psnr_db, PSNR_CSV_CAP)
    values = [capped, ssim_value, charbonnier, fft, total]
    return f"{step},{split}," + ",".join(f"{v:.9g}" for v in values)
