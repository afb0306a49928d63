"""Training objective: robust pixel loss plus a frequency-domain term.

The pixel term takes one square root per frame of (sum of squared
differences + eps^2), then averages over frames; a per-pixel variant is
available behind a flag.  The frequency term is the L1 norm of the
difference spectrum (unnormalized full DFT, real and imaginary parts of
every bin and channel), again averaged over frames.  Both are tape ops, so
the total differentiates end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor

__all__ = [
    "LossConfig",
    "LossReport",
    "charbonnier_loss",
    "fft_loss",
    "total_loss",
]


@dataclass
class LossConfig:
    epsilon: float = 1e-3
    fft_weight: float = 0.01  # the config-file key for this is `lambda`
    per_pixel: bool = False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.fft_weight < 0:
            raise ValueError(f"fft_weight must be >= 0, got {self.fft_weight}")


@dataclass
class LossReport:
    charbonnier: float
    fft: float
    total: float
    per_frame_charbonnier: list[float] = field(default_factory=list)
    per_frame_fft: list[float] = field(default_factory=list)
    node: DiffTensor | None = None


def _check_shapes(restored: DiffTensor, truth: DiffTensor) -> None:
    if restored.shape != truth.shape:
        raise ValueError(
            f"restored shape {restored.shape} does not match truth {truth.shape}"
        )
    if restored.value.ndim != 4:
        raise ValueError(f"expected [T,H,W,C] stacks, got shape {restored.shape}")


def _charbonnier_frames(diff: DiffTensor, epsilon: float) -> DiffTensor:
    sq = ad.mul(diff, diff)
    sse = ad.sum_axes(sq, (1, 2, 3))
    return ad.sqrt(ad.shift(sse, epsilon * epsilon))


def charbonnier_loss(
    restored: DiffTensor,
    truth: DiffTensor,
    epsilon: float = 1e-3,
    per_pixel: bool = False,
) -> DiffTensor:
    """Mean over frames of sqrt(per-frame SSE + eps^2); scalar on the tape."""
    _check_shapes(restored, truth)
    diff = ad.sub(restored, truth)
    if per_pixel:
        sq = ad.mul(diff, diff)
        return ad.mean_all(ad.sqrt(ad.shift(sq, epsilon * epsilon)))
    return ad.mean_all(_charbonnier_frames(diff, epsilon))


def _fft_frames(diff: DiffTensor) -> DiffTensor:
    # F(R) - F(G) == F(R - G): the transform is linear, so work on the
    # difference directly
    chan_first = ad.transpose(diff, (0, 3, 1, 2))
    spectrum = ad.fft2_stack(chan_first)
    return ad.sum_axes(ad.absolute(spectrum), (1, 2, 3, 4))


def fft_loss(restored: DiffTensor, truth: DiffTensor) -> DiffTensor:
    """Mean over frames of the L1 difference-spectrum norm."""
    _check_shapes(restored, truth)
    return ad.mean_all(_fft_frames(ad.sub(restored, truth)))


def total_loss(
    restored: DiffTensor, truth: DiffTensor, cfg: LossConfig | None = None
) -> LossReport:
    """Pixel term + fft_weight * frequency term, with per-frame breakdown."""
    cfg = cfg or LossConfig()
    _check_shapes(restored, truth)
    diff = ad.sub(restored, truth)
    if cfg.per_pixel:
        sq = ad.mul(diff, diff)
        char = ad.mean_all(ad.sqrt(ad.shift(sq, cfg.epsilon * cfg.epsilon)))
        char_frames = np.array([])
    else:
        frames = _charbonnier_frames(diff, cfg.epsilon)
        char = ad.mean_all(frames)
        char_frames = frames.value
    fft_frames = _fft_frames(diff)
    fft = ad.mean_all(fft_frames)
    total = ad.add(char, ad.scale(fft, cfg.fft_weight))
    return LossReport(
        charbonnier=float(char.value),
        fft=float(fft.value),
        total=float(total.value),
        per_frame_charbonnier=[float(v) for v in char_frames],
        per_frame_fft=[float(v) for v in fft_frames.value],
        node=total,
    )
