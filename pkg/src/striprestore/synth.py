"""Synthetic clean/degraded video pairs with directional degradations.

Clean sequences are a procedurally textured base image translated with wrap
padding at a constant per-sequence velocity.  Degradations are oriented:
motion blur (normalized line kernel), rain (additive anti-aliased bright
segments), and moire (multiplicative sinusoidal interference).  Everything
is a pure function of (seed, spec).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

__all__ = [
    "DegradationSpec",
    "CleanVideo",
    "base_image",
    "translate_wrap",
    "line_kernel",
    "degrade_frame",
    "gen_video_pair",
    "write_manifest",
    "read_manifest",
]

KINDS = ("blur", "rain", "moire")


@dataclass(frozen=True)
class DegradationSpec:
    kind: str = "blur"
    orientation: float = 0.0  # degrees from the horizontal axis
    orientation_step: float = 0.0  # degrees added per frame index
    blur_length: int = 7
    rain_density: float = 0.0015  # streaks per pixel
    rain_length: int = 9
    moire_freq: float = 0.12  # cycles per pixel
    moire_amplitude: float = 0.35
    phase: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        if self.blur_length < 1:
            raise ValueError(f"blur_length must be >= 1, got {self.blur_length}")
        if self.rain_density < 0 or self.rain_length < 1:
            raise ValueError("rain parameters must be nonnegative")
        if self.moire_amplitude < 0:
            raise ValueError("moire_amplitude must be nonnegative")

    def at_frame(self, index: int) -> "DegradationSpec":
        """Per-frame view: parameters drift smoothly, randomness reseeds."""
        return replace(
            self,
            orientation=self.orientation + self.orientation_step * index,
            phase=self.phase + 0.4 * index,
            seed=self.seed + 1009 * index,
        )


@dataclass
class CleanVideo:
    frames: np.ndarray  # [T,H,W,3] in [0,1]
    velocity: tuple[float, float]  # (dy, dx) pixels per frame


def base_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Textured base: low-pass noise, random rectangles/disks, contrast bars."""
    noise = rng.normal(size=(h, w, 3))
    spectrum = np.fft.fft2(noise, axes=(0, 1))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    keep = (np.sqrt(fy**2 + fx**2) <= 0.22)[..., None]
    smooth = np.fft.ifft2(spectrum * keep, axes=(0, 1)).real
    lo, hi = smooth.min(), smooth.max()
    img = (smooth - lo) / (hi - lo + 1e-12)

    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(6):
        color = rng.uniform(0.1, 0.9, size=3)
        if rng.uniform() < 0.5:
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            hh, ww = rng.integers(h // 8, h // 2), rng.integers(w // 8, w // 2)
            inside = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(min(h, w) / 10, min(h, w) / 4)
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[inside] = 0.6 * color + 0.4 * img[inside]

    for _ in range(8):  # thin high-contrast bars, text-like detail
        y0 = int(rng.integers(0, h - 1))
        x0 = int(rng.integers(0, w - 1))
        length = int(rng.integers(3, max(4, w // 4)))
        tone = rng.uniform(0.0, 1.0)
        if rng.uniform() < 0.5:
            img[y0, x0 : min(w, x0 + length)] = tone
        else:
            img[y0 : min(h, y0 + length), x0] = tone
    return np.clip(img, 0.0, 1.0)


def translate_wrap(image: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Bilinear translation with wrap padding; integer shifts are exact."""
    iy, fy = int(np.floor(dy)), dy - np.floor(dy)
    ix, fx = int(np.floor(dx)), dx - np.floor(dx)
    base = np.roll(image, (iy, ix), axis=(0, 1))
    if fy == 0.0 and fx == 0.0:
        return base
    down = np.roll(base, 1, axis=0)
    right = np.roll(base, 1, axis=1)
    diag = np.roll(down, 1, axis=1)
    return (
        (1 - fy) * (1 - fx) * base
        + fy * (1 - fx) * down
        + (1 - fy) * fx * right
        + fy * fx * diag
    )


def line_kernel(length: int, degrees: float) -> np.ndarray:
    """Normalized oriented line kernel via bilinear splat; length 1 is identity."""
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    theta = np.deg2rad(degrees)
    half = (length - 1) / 2.0
    reach = int(np.ceil(half)) + 1
    k = 2 * reach + 1
    kernel = np.zeros((k, k))
    for i in range(length):
        off = i - half
        y = off * np.sin(theta) + reach
        x = off * np.cos(theta) + reach
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        fy, fx = y - y0, x - x0
        kernel[y0, x0] += (1 - fy) * (1 - fx)
        kernel[y0, x0 + 1] += (1 - fy) * fx
        kernel[y0 + 1, x0] += fy * (1 - fx)
        kernel[y0 + 1, x0 + 1] += fy * fx
    return kernel / kernel.sum()


def _blur(frame: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    if spec.blur_length == 1:
        return frame
    kernel = line_kernel(spec.blur_length, spec.orientation)
    out = np.empty_like(frame)
    for c in range(3):
        out[:, :, c] = ndimage.convolve(frame[:, :, c], kernel, mode="wrap")
    return out


def _rain(frame: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    h, w, _ = frame.shape
    rng = np.random.default_rng(spec.seed)
    count = int(round(spec.rain_density * h * w))
    if count == 0:
        return frame
    theta = np.deg2rad(spec.orientation)
    overlay = np.zeros((h, w))
    samples = 2 * spec.rain_length
    for _ in range(count):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        brightness = rng.uniform(0.35, 0.8)
        for s in range(samples):
            off = (s / (samples - 1) - 0.5) * spec.rain_length
            y = (cy + off * np.sin(theta)) % h
            x = (cx + off * np.cos(theta)) % w
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            fy, fx = y - y0, x - x0
            amount = brightness / samples
            overlay[y0 % h, x0 % w] += (1 - fy) * (1 - fx) * amount
            overlay[y0 % h, (x0 + 1) % w] += (1 - fy) * fx * amount
            overlay[(y0 + 1) % h, x0 % w] += fy * (1 - fx) * amount
            overlay[(y0 + 1) % h, (x0 + 1) % w] += fy * fx * amount
    return frame + overlay[:, :, None]


def _moire(frame: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    h, w, _ = frame.shape
    theta = np.deg2rad(spec.orientation)
    yy, xx = np.mgrid[0:h, 0:w]
    along = xx * np.cos(theta) + yy * np.sin(theta)
    pattern = 1.0 + spec.moire_amplitude * np.sin(
        2 * np.pi * spec.moire_freq * along + spec.phase
    )
    return frame * pattern[:, :, None]


def degrade_frame(frame: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Apply one oriented degradation; output clamped to [0,1]."""
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"expected [H,W,3] frame, got shape {frame.shape}")
    out = {"blur": _blur, "rain": _rain, "moire": _moire}[spec.kind](frame, spec)
    return np.clip(out, 0.0, 1.0)


def gen_video_pair(
    base_seed: int, t_n: int, h: int, w: int, spec: DegradationSpec
) -> tuple[CleanVideo, np.ndarray]:
    """Deterministic clean/degraded pair; degradation drifts smoothly over t."""
    rng = np.random.default_rng(base_seed)
    base = base_image(rng, h, w)
    velocity = tuple(rng.uniform(-2.0, 2.0, size=2))
    clean = np.empty((t_n, h, w, 3))
    degraded = np.empty_like(clean)
    for t in range(t_n):
        clean[t] = translate_wrap(base, velocity[0] * t, velocity[1] * t)
        degraded[t] = degrade_frame(clean[t], spec.at_frame(t))
    return CleanVideo(frames=clean, velocity=velocity), degraded


def write_manifest(path, pairs: list[tuple[str, str]]) -> None:
    """One `clean_path degraded_path` line per frame."""
    with open(path, "w", encoding="utf-8") as fp:
        for clean_path, degraded_path in pairs:
            fp.write(f"{clean_path} {degraded_path}\n")


def read_manifest(path) -> list[tuple[str, str]]:
    pairs = []
    with open(path, encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(
                    f"{path}:{lineno}: expected `clean_path degraded_path`, "
                    f"got {line!r}"
                )
            pairs.append((parts[0], parts[1]))
    return pairs
