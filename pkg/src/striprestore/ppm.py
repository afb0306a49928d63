"""Binary PPM (P6, 8-bit) frame io, plus optional PNG export."""

from __future__ import annotations

import numpy as np

__all__ = ["write_ppm", "read_ppm", "write_png", "quantize"]


def quantize(frame: np.ndarray) -> np.ndarray:
    """Clamp to [0,1] and round to 8-bit."""
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, frame: np.ndarray) -> None:
    """Write one [H,W,3] frame in [0,1]; header is `P6\\n<W> <H>\\n255\\n`."""
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"expected [H,W,3] frame, got shape {frame.shape}")
    h, w, _ = frame.shape
    with open(path, "wb") as fp:
        fp.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fp.write(quantize(frame).tobytes())


class _HeaderScanner:
    """Tracks the byte offset while pulling whitespace-separated header tokens."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def fail(self, message: str):
        raise ValueError(f"malformed PPM header at byte {self.pos}: {message}")

    def token(self) -> bytes:
        data, n = self.data, len(self.data)
        while self.pos < n:
            c = data[self.pos : self.pos + 1]
            if c == b"#":  # comment runs to end of line
                while self.pos < n and data[self.pos : self.pos + 1] != b"\n":
                    self.pos += 1
            elif c.isspace():
                self.pos += 1
            else:
                break
        if self.pos >= n:
            self.fail("unexpected end of file")
        start = self.pos
        while self.pos < n and not data[self.pos : self.pos + 1].isspace():
            self.pos += 1
        return data[start : self.pos]

    def integer(self, what: str) -> int:
        tok = self.token()
        if not tok.isdigit():
            self.pos -= len(tok)
            self.fail(f"expected {what}, got {tok!r}")
        return int(tok)


def read_ppm(path) -> np.ndarray:
    """Read a P6 file back to a float [H,W,3] frame in [0,1]."""
    with open(path, "rb") as fp:
        data = fp.read()
    scan = _HeaderScanner(data)
    magic = scan.token()
    if magic != b"P6":
        scan.pos = 0
        scan.fail(f"expected magic b'P6', got {magic!r}")
    w = scan.integer("width")
    h = scan.integer("height")
    maxval = scan.integer("maxval")
    if maxval != 255:
        scan.fail(f"only 8-bit maxval 255 is supported, got {maxval}")
    scan.pos += 1  # single whitespace byte separates header from pixels
    pixels = data[scan.pos :]
    if len(pixels) < 3 * w * h:
        scan.fail(f"pixel payload holds {len(pixels)} bytes, need {3 * w * h}")
    raw = np.frombuffer(pixels[: 3 * w * h], dtype=np.uint8)
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0


def write_png(path, frame: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(quantize(frame), mode="RGB").save(path, format="PNG")
