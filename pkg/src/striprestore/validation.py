"""Input validation helpers for array-facing entry points."""

from __future__ import annotations

import numpy as np

__all__ = ["check_video", "check_video_pairs"]


def check_video(x, name: str = "X") -> np.ndarray:
    """Coerce to a float64 [N,T,H,W,3] batch; a single [T,H,W,3] stack gains
    a leading axis."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5 or arr.shape[-1] != 3:
        raise ValueError(
            f"{name} must be [N,T,H,W,3] or [T,H,W,3], got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_video_pairs(x, y) -> tuple[np.ndarray, np.ndarray]:
    xa = check_video(x, "X")
    ya = check_video(y, "y")
    if xa.shape != ya.shape:
        raise ValueError(
            f"X and y must align frame for frame, got {xa.shape} vs {ya.shape}"
        )
    return xa, ya
