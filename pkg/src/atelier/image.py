"""Canonical image raster, PPM interchange, and content hashing.

Pixels are float64 in [0,1], shape (height, width, 3), row-major RGB.
Quantization to 8 bits happens only at I/O boundaries so transform-domain
math keeps full precision.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, MalformedRecord

MIN_SIDE = 16

DIGEST_ALGORITHM = "sha256"


@dataclass(frozen=True)
class Image:
    """Owned RGB raster. `pixels` is (h, w, 3) float64 in [0,1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (h, w, 3) array, got {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise ValueError(f"image sides must be >= {MIN_SIDE}, got {px.shape[:2]}")
        if not np.isfinite(px).all():
            raise ValueError("image contains non-finite samples")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("image samples out of [0,1]")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def zeros(cls, width: int, height: int) -> "Image":
        return cls(np.zeros((height, width, 3)))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Image":
        """Clamp an arbitrary float array into a valid image."""
        return cls(np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0))

    def quantized(self) -> np.ndarray:
        """8-bit view used for interchange and hashing: round(x*255)."""
        return np.round(self.pixels * 255.0).astype(np.uint8)

    def allclose(self, other: "Image", atol: float = 0.0) -> bool:
        return self.pixels.shape == other.pixels.shape and bool(
            np.allclose(self.pixels, other.pixels, rtol=0.0, atol=atol)
        )


def write_ppm(image: Image) -> bytes:
    """Serialize to binary PPM (P6, maxval 255), the canonical interchange form."""
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + image.quantized().tobytes()


def read_ppm(data: bytes) -> Image:
    """Parse binary PPM (P6, maxval 255). Rejects anything non-canonical."""
    if not data.startswith(b"P6"):
        raise MalformedRecord("not a P6 PPM stream", 0)
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise MalformedRecord("bad PPM header token", start)
        fields.append(int(token))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise MalformedRecord("missing whitespace after maxval", pos)
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise MalformedRecord(f"unsupported maxval {maxval}", pos)
    expected = width * height * 3
    raster = data[pos : pos + expected]
    if len(raster) != expected:
        raise MalformedRecord(
            f"truncated raster: expected {expected} bytes, got {len(raster)}", pos
        )
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return Image(arr.astype(np.float64) / 255.0)


def content_hash(image: Image) -> bytes:
    """256-bit digest of the canonical PPM serialization."""
    return hashlib.sha256(write_ppm(image)).digest()


def content_hash_hex(image: Image) -> str:
    return content_hash(image).hex()


def mse(a: Image, b: Image) -> float:
    if a.pixels.shape != b.pixels.shape:
        raise DimensionMismatch(f"{a.pixels.shape} vs {b.pixels.shape}")
    diff = a.pixels - b.pixels
    return float(np.mean(diff * diff))


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB on the [0,1] scale; inf for identical."""
    err = mse(a, b)
    if err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / err))
