"""Deterministic attack simulations: baseline-JPEG requantization,
seeded Gaussian noise, block-aligned cropping, and bilinear resizing.

The JPEG path runs the full transform/quantize/dequantize chain in 4:4:4
(no chroma subsampling and no entropy coding, neither of which changes
samples for the luma-only watermark this harness stresses).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .colorspace import rgb_to_ycbcr, ycbcr_to_rgb
from .dct import BLOCK, dct_blocks, idct_blocks, reflect_pad_to_block
from .image import Image
from .resample import bilinear_resize

NOISE_GENERATOR = "numpy-pcg64"

# ITU T.81 Annex K reference quantization tables.
LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
CHROMA_TABLE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)


def quality_scaled_table(table: np.ndarray, quality: int) -> np.ndarray:
    """Conventional quality rule: 5000/q below 50, else 200 - 2q, then
    floor((t*scale + 50)/100) clamped to [1, 255]. Quality 50 is identity."""
    if not 1 <= quality <= 100:
        raise ValueError("quality must be in [1, 100]")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    scaled = np.floor((table * scale + 50.0) / 100.0)
    return np.clip(scaled, 1.0, 255.0)


def jpeg_roundtrip(image: Image, quality: int) -> Image:
    """Baseline-JPEG simulation: level-shifted blockwise DCT, quantize,
    dequantize, inverse; reflect-padded then cropped back if unaligned."""
    luma_q = quality_scaled_table(LUMA_TABLE, quality)
    chroma_q = quality_scaled_table(CHROMA_TABLE, quality)
    ycc = rgb_to_ycbcr(image.pixels)
    out = np.empty_like(ycc)
    for plane_idx in range(3):
        table = luma_q if plane_idx == 0 else chroma_q
        plane = ycc[..., plane_idx] * 255.0 - 128.0
        padded, (h, w) = reflect_pad_to_block(plane)
        coeffs = dct_blocks(padded)
        coeffs = np.round(coeffs / table) * table
        restored = idct_blocks(coeffs)[:h, :w]
        out[..., plane_idx] = (restored + 128.0) / 255.0
    return Image.from_array(ycbcr_to_rgb(out))


def gaussian_noise(image: Image, sigma: float, seed: int) -> Image:
    """I.i.d. normal perturbation from a seeded PCG64 generator, clamped."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return Image(image.pixels.copy())
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=image.pixels.shape)
    return Image.from_array(image.pixels + noise)


def _largest_aligned_offset(slack: int) -> int:
    return (slack // 2) // BLOCK * BLOCK


def crop(
    image: Image, fraction: float, anchor: tuple[int, int] | str = "center"
) -> tuple[Image, tuple[int, int]]:
    """Remove `fraction` of the area as a border band, keeping a
    block-aligned sub-image; returns (cropped, original offset)."""
    if not 0.0 <= fraction < 0.5:
        raise ValueError("fraction must be in [0, 0.5)")
    if fraction == 0.0:
        return Image(image.pixels.copy()), (0, 0)
    keep_scale = math.sqrt(1.0 - fraction)
    keep_w = min(image.width, math.ceil(image.width * keep_scale / BLOCK) * BLOCK)
    keep_h = min(image.height, math.ceil(image.height * keep_scale / BLOCK) * BLOCK)
    if anchor == "center":
        off_x = _largest_aligned_offset(image.width - keep_w)
        off_y = _largest_aligned_offset(image.height - keep_h)
    else:
        off_x, off_y = anchor
        if off_x % BLOCK or off_y % BLOCK:
            raise ValueError("anchor offsets must be multiples of 8")
        if off_x + keep_w > image.width or off_y + keep_h > image.height:
            raise ValueError("anchor pushes the crop out of bounds")
    region = image.pixels[off_y : off_y + keep_h, off_x : off_x + keep_w]
    return Image(region.copy()), (off_x, off_y)


def resize(image: Image, factor: float) -> Image:
    """Bilinear resample to round(dim * factor)."""
    if not 0.0 < factor <= 4.0:
        raise ValueError("factor must be in (0, 4]")
    out_h = max(16, int(round(image.height * factor)))
    out_w = max(16, int(round(image.width * factor)))
    return Image.from_array(bilinear_resize(image.pixels, out_h, out_w))


@dataclass(frozen=True)
class AttackSpec:
    """One benchmark cell: jpeg(quality) | gaussian_noise(sigma, seed) |
    crop(fraction) | resize(factor)."""

    kind: str
    quality: int | None = None
    sigma: float | None = None
    seed: int | None = None
    fraction: float | None = None
    factor: float | None = None

    def __post_init__(self):
        if self.kind == "jpeg":
            if self.quality is None or not 1 <= self.quality <= 100:
                raise ValueError("jpeg attack needs quality in [1,100]")
        elif self.kind == "gaussian_noise":
            if self.sigma is None or self.sigma < 0:
                raise ValueError("gaussian_noise attack needs sigma >= 0")
        elif self.kind == "crop":
            if self.fraction is None or not 0.0 <= self.fraction < 0.5:
                raise ValueError("crop attack needs fraction in [0, 0.5)")
        elif self.kind == "resize":
            if self.factor is None or not 0.0 < self.factor <= 4.0:
                raise ValueError("resize attack needs factor in (0, 4]")
        elif self.kind != "none":
            raise ValueError(f"unknown attack kind {self.kind!r}")

    @property
    def param(self) -> float:
        return {
            "jpeg": self.quality,
            "gaussian_noise": self.sigma,
            "crop": self.fraction,
            "resize": self.factor,
            "none": 0,
        }[self.kind]

    @property
    def label(self) -> str:
        if self.kind == "jpeg":
            return f"jpeg_q{self.quality}"
        if self.kind == "gaussian_noise":
            return f"noise_s{self.sigma:g}"
        if self.kind == "crop":
            return f"crop_f{self.fraction:g}"
        if self.kind == "resize":
            return f"resize_f{self.factor:g}"
        return "none"

    def apply(self, image: Image, seed_offset: int = 0) -> tuple[Image, tuple[int, int] | None]:
        """Produce the extraction-ready attacked image.

        Crops report the surviving window's offset; resized images are
        resampled back to the original dimensions first.
        """
        if self.kind == "none":
            return Image(image.pixels.copy()), None
        if self.kind == "jpeg":
            return jpeg_roundtrip(image, self.quality), None
        if self.kind == "gaussian_noise":
            base_seed = self.seed if self.seed is not None else 0
            return gaussian_noise(image, self.sigma, base_seed + seed_offset), None
        if self.kind == "crop":
            cropped, offset = crop(image, self.fraction)
            return cropped, offset
        resized = resize(image, self.factor)
        restored = bilinear_resize(resized.pixels, image.height, image.width)
        return Image.from_array(restored), None

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind}
        for key in ("quality", "sigma", "seed", "fraction", "factor"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "AttackSpec":
        allowed = {"kind", "quality", "sigma", "seed", "fraction", "factor"}
        if set(obj) - allowed:
            raise ValueError(f"unknown attack keys {sorted(set(obj) - allowed)}")
        return cls(**obj)
