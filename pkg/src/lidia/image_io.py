"""Image substrate: binary PGM/PPM I/O, Gaussian noise, PSNR, luminance.

Images are float64 arrays of shape (H, W, C) with C in {1, 3} and values on the
[0, 1] scale.  Noise levels are given on the 8-bit scale and divided by 255 on
entry.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import Xoshiro256pp

PSNR_CAP = 99.0
LUMA_WEIGHTS = (0.2989, 0.5870, 0.1140)


class ImageFormatError(ValueError):
    """Base class for PGM/PPM parse failures; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class HeaderError(ImageFormatError):
    pass


class MaxvalError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    seed: int

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def as_plane(img) -> np.ndarray:
    """Coerce an (H, W) or (H, W, C) array into the canonical (H, W, C) float plane."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W[, C]) with C in {{1, 3}}, got shape {a.shape}")
    return a


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise HeaderError("unexpected end of header", start)
    return buf[start:pos], pos


def decode_netpbm(buf: bytes) -> np.ndarray:
    magic, pos = _read_token(buf, 0)
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise HeaderError(f"unsupported magic {magic!r}, expected P5 or P6", 0)
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = _read_token(buf, pos)
        start = pos - len(tok)
        if not tok.isdigit():
            raise HeaderError(f"{name} is not a decimal integer: {tok!r}", start)
        fields.append((int(tok), start))
    (width, _), (height, hpos), (maxval, mpos) = fields
    if width <= 0 or height <= 0:
        raise HeaderError(f"non-positive dimensions {width}x{height}", hpos)
    if maxval != 255:
        raise MaxvalError(f"maxval must be 255, got {maxval}", mpos)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise HeaderError("missing whitespace after maxval", pos)
    pos += 1
    expected = width * height * channels
    payload = buf[pos : pos + expected]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"payload has {len(payload)} bytes, header requires {expected}", pos + len(payload)
        )
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return data.astype(np.float64) / 255.0


def load_image(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) file with maxval 255."""
    return decode_netpbm(Path(path).read_bytes())


def quantize(img) -> np.ndarray:
    """Map [0, 1] samples to bytes: clamp, scale by 255, round half up."""
    a = np.clip(as_plane(img), 0.0, 1.0) * 255.0
    return np.floor(a + 0.5).astype(np.uint8)


def encode_netpbm(img) -> bytes:
    q = quantize(img)
    h, w, c = q.shape
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def save_image(img, path) -> None:
    """Write atomically: the target never holds a partial file."""
    path = Path(path)
    data = encode_netpbm(img)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def add_awgn(img, spec: NoiseSpec) -> np.ndarray:
    """Add white Gaussian noise of std ``spec.sigma / 255``; the result is not clamped."""
    a = as_plane(img)
    if spec.sigma == 0:
        return a.copy()
    g = Xoshiro256pp(spec.seed).normal(a.size).reshape(a.shape)
    return a + (spec.sigma / 255.0) * g


def psnr(a, b) -> float:
    a = as_plane(a)
    b = as_plane(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def luminance(img) -> np.ndarray:
    a = as_plane(img)
    if a.shape[2] != 3:
        raise ValueError(f"luminance needs 3 channels, got {a.shape[2]}")
    r, g, b = LUMA_WEIGHTS
    return (r * a[:, :, 0] + g * a[:, :, 1] + b * a[:, :, 2])[:, :, None]
