"""Spread-spectrum DCT watermarking with blind extraction and provenance.

A 64-bit payload is spread over pseudo-randomly chosen mid-band (zig-zag
6..14) luma DCT slots, each chip a signed amplitude bump. Extraction needs
only the key: each bit is the sign of the signed sum of its chips. Key
material is an HMAC expansion of (content digest, timestamp, salt), so a
provenance record plus the secret salt re-derives the key exactly.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import os
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .colorspace import rgb_to_ycbcr, ycbcr_to_rgb
from .dct import BLOCK, ZIGZAG, dct_blocks, idct_blocks, reflect_pad_to_block
from .errors import CapacityExceeded, DimensionMismatch, MalformedRecord
from .image import DIGEST_ALGORITHM, Image, psnr  # noqa: F401 (psnr re-exported)
from .session import PipelineConfig

PROVENANCE_SCHEMA_VERSION = 1
BAND_ZIGZAG = tuple(range(6, 15))  # mid-frequency zig-zag indices, 9 per block
BAND_COORDS = tuple(ZIGZAG[i] for i in BAND_ZIGZAG)
PAYLOAD_BITS = 64
RECOVERY_THRESHOLD = 0.99
DEFAULT_AMPLITUDE = 0.022
KDF_NAME = "hmac-sha256"
SALT_ENV_VAR = "ATELIER_SALT"
_DEV_SALT = "atelier-dev-salt"


def watermark_salt() -> str:
    return os.environ.get(SALT_ENV_VAR, _DEV_SALT)


def slot_capacity(width: int, height: int) -> int:
    """Usable chip slots after reflect-padding to full blocks."""
    bw = -(-width // BLOCK)
    bh = -(-height // BLOCK)
    return bw * bh * len(BAND_ZIGZAG)


@dataclass(frozen=True)
class WatermarkKey:
    seed: int
    payload: int
    width: int
    height: int
    chips_per_bit: int
    amplitude: float
    block: int = BLOCK
    band: tuple[int, ...] = BAND_ZIGZAG

    def __post_init__(self):
        if self.chips_per_bit < 1:
            raise ValueError("chips_per_bit must be >= 1")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be > 0")
        slots = slot_capacity(self.width, self.height)
        if self.chips_per_bit * PAYLOAD_BITS > slots:
            raise CapacityExceeded(
                f"{self.chips_per_bit} chips/bit x {PAYLOAD_BITS} bits "
                f"> {slots} slots at {self.width}x{self.height}"
            )

    @property
    def payload_bits(self) -> np.ndarray:
        """MSB-first payload bits as +/-1."""
        bits = np.array(
            [(self.payload >> (PAYLOAD_BITS - 1 - t)) & 1 for t in range(PAYLOAD_BITS)]
        )
        return bits * 2 - 1

    def predicted_rms(self) -> float:
        """Pre-clamp RMS pixel perturbation of an embed with this key."""
        n_chips = self.chips_per_bit * PAYLOAD_BITS
        return self.amplitude * float(np.sqrt(n_chips / (self.width * self.height)))


def derive_key(
    digest: bytes,
    timestamp: datetime,
    salt: str,
    width: int,
    height: int,
    chips_per_bit: int | None = None,
    amplitude: float = DEFAULT_AMPLITUDE,
) -> WatermarkKey:
    """Keyed expansion of (digest || timestamp || salt) into seed + payload."""
    if len(digest) != 32:
        raise ValueError("digest must be 32 bytes")
    slots = slot_capacity(width, height)
    if chips_per_bit is None:
        chips_per_bit = slots // PAYLOAD_BITS
        if chips_per_bit < 1:
            raise CapacityExceeded(
                f"{slots} slots cannot carry {PAYLOAD_BITS} payload bits"
            )
    message = digest + timestamp.isoformat().encode("ascii")
    expansion = hmac.new(salt.encode("utf-8"), message, hashlib.sha256).digest()
    return WatermarkKey(
        seed=int.from_bytes(expansion[:8], "big"),
        payload=int.from_bytes(expansion[8:16], "big"),
        width=width,
        height=height,
        chips_per_bit=chips_per_bit,
        amplitude=amplitude,
    )


@dataclass(frozen=True)
class WatermarkPattern:
    """Chip assignments derived from the key alone: parallel arrays of
    block index, band coordinate index, payload bit index, and sign."""

    blocks: np.ndarray
    coords: np.ndarray
    bits: np.ndarray
    signs: np.ndarray


def expand_pattern(key: WatermarkKey) -> WatermarkPattern:
    bw = -(-key.width // BLOCK)
    bh = -(-key.height // BLOCK)
    n_slots = bw * bh * len(BAND_ZIGZAG)
    n_chips = key.chips_per_bit * PAYLOAD_BITS
    rng = np.random.default_rng(key.seed)
    slots = rng.permutation(n_slots)[:n_chips]
    signs = rng.integers(0, 2, size=n_chips) * 2 - 1
    return WatermarkPattern(
        blocks=slots // len(BAND_ZIGZAG),
        coords=slots % len(BAND_ZIGZAG),
        bits=np.arange(n_chips) % PAYLOAD_BITS,
        signs=signs,
    )


def _luma_coefficients(image: Image) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    ycc = rgb_to_ycbcr(image.pixels)
    padded, original = reflect_pad_to_block(ycc[..., 0])
    return dct_blocks(padded), ycc, original


def embed(image: Image, key: WatermarkKey) -> Image:
    """Add the chip pattern to the luma mid-band and rebuild the image."""
    if (image.width, image.height) != (key.width, key.height):
        raise DimensionMismatch(
            f"key is for {key.width}x{key.height}, image is {image.width}x{image.height}"
        )
    pattern = expand_pattern(key)
    coeffs, ycc, (h, w) = _luma_coefficients(image)
    nby, nbx = coeffs.shape[:2]
    bit_values = key.payload_bits[pattern.bits]
    band_rows = np.array([c[0] for c in BAND_COORDS])
    band_cols = np.array([c[1] for c in BAND_COORDS])
    coeffs[
        pattern.blocks // nbx,
        pattern.blocks % nbx,
        band_rows[pattern.coords],
        band_cols[pattern.coords],
    ] += key.amplitude * pattern.signs * bit_values
    luma = idct_blocks(coeffs)[:h, :w]
    out = ycc.copy()
    out[..., 0] = luma
    return Image.from_array(ycbcr_to_rgb(out))


@dataclass(frozen=True)
class CropWindow:
    """Where a cropped image sits inside the keyed original (block-aligned)."""

    offset_x: int
    offset_y: int

    def __post_init__(self):
        if self.offset_x % BLOCK or self.offset_y % BLOCK:
            raise ValueError("crop offsets must be block aligned")


@dataclass(frozen=True)
class ExtractionResult:
    bit_accuracy: float
    recovered: bool
    bits_scored: int
    correlations: tuple[float, ...] = field(repr=False, default=())


def extract(
    image: Image, key: WatermarkKey, window: CropWindow | None = None
) -> ExtractionResult:
    """Blind payload recovery: sign of the signed chip sum per bit.

    With `window`, `image` is a block-aligned crop of the keyed original
    and only surviving chips are correlated; bits with no surviving chip
    are excluded from the accuracy."""
    if window is None and (image.width, image.height) != (key.width, key.height):
        raise DimensionMismatch(
            f"key is for {key.width}x{key.height}, image is {image.width}x{image.height}"
        )
    pattern = expand_pattern(key)
    coeffs, _, _ = _luma_coefficients(image)
    nby, nbx = coeffs.shape[:2]
    key_nbx = -(-key.width // BLOCK)

    block_row = pattern.blocks // key_nbx
    block_col = pattern.blocks % key_nbx
    if window is not None:
        off_r = window.offset_y // BLOCK
        off_c = window.offset_x // BLOCK
        block_row = block_row - off_r
        block_col = block_col - off_c
    alive = (block_row >= 0) & (block_row < nby) & (block_col >= 0) & (block_col < nbx)

    band_rows = np.array([c[0] for c in BAND_COORDS])
    band_cols = np.array([c[1] for c in BAND_COORDS])
    sums = np.zeros(PAYLOAD_BITS)
    counts = np.zeros(PAYLOAD_BITS, dtype=int)
    if alive.any():
        values = coeffs[
            block_row[alive],
            block_col[alive],
            band_rows[pattern.coords[alive]],
            band_cols[pattern.coords[alive]],
        ]
        np.add.at(sums, pattern.bits[alive], pattern.signs[alive] * values)
        np.add.at(counts, pattern.bits[alive], 1)

    scored = counts > 0
    decided = np.where(sums > 0, 1, -1)
    expected = key.payload_bits
    matches = (decided == expected) & scored
    bits_scored = int(scored.sum())
    accuracy = float(matches.sum() / bits_scored) if bits_scored else 0.0
    return ExtractionResult(
        bit_accuracy=accuracy,
        recovered=bits_scored > 0 and accuracy >= RECOVERY_THRESHOLD,
        bits_scored=bits_scored,
        correlations=tuple(float(s) for s in sums),
    )


def protection_loss(
    original: Image,
    protected: Image,
    recoverability_penalty: float,
    alpha: float,
) -> float:
    """Total squared perturbation plus the weighted recoverability penalty."""
    if original.pixels.shape != protected.pixels.shape:
        raise DimensionMismatch(
            f"{original.pixels.shape} vs {protected.pixels.shape}"
        )
    if not 0.0 <= recoverability_penalty <= 1.0:
        raise ValueError("recoverability penalty must be in [0,1]")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    diff = protected.pixels - original.pixels
    return float(np.sum(diff * diff) + alpha * recoverability_penalty)


@dataclass(frozen=True)
class ProvenanceRecord:
    """Audit record; with the secret salt it re-derives the watermark key."""

    generated_at: str  # ISO timestamp used in key derivation
    planner_model: str
    generator_model: str
    user_hash: str
    digest_algorithm: str
    kdf: str
    digest_pre: str
    digest_post: str
    width: int
    height: int
    chips_per_bit: int
    amplitude: float
    block: int
    band: tuple[int, ...]
    config: dict
    session_id: str
    schema: int = PROVENANCE_SCHEMA_VERSION

    def to_json(self) -> dict:
        return {
            "schema": self.schema,
            "generated_at": self.generated_at,
            "planner_model": self.planner_model,
            "generator_model": self.generator_model,
            "user_hash": self.user_hash,
            "digest_algorithm": self.digest_algorithm,
            "kdf": self.kdf,
            "digest_pre": self.digest_pre,
            "digest_post": self.digest_post,
            "width": self.width,
            "height": self.height,
            "watermark": {
                "block": self.block,
                "band": list(self.band),
                "chips_per_bit": self.chips_per_bit,
                "amplitude": self.amplitude,
                "payload_bits": PAYLOAD_BITS,
                "recovery_threshold": RECOVERY_THRESHOLD,
            },
            "config": self.config,
            "session_id": self.session_id,
        }

    def to_canonical_json(self) -> bytes:
        return (
            json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")) + "\n"
        ).encode("utf-8")

    @classmethod
    def from_json(cls, obj: dict) -> "ProvenanceRecord":
        expected = {
            "schema", "generated_at", "planner_model", "generator_model",
            "user_hash", "digest_algorithm", "kdf", "digest_pre", "digest_post",
            "width", "height", "watermark", "config", "session_id",
        }
        if not isinstance(obj, dict) or set(obj) != expected:
            raise MalformedRecord("bad provenance document")
        if obj["schema"] != PROVENANCE_SCHEMA_VERSION:
            raise MalformedRecord(f"unsupported provenance schema {obj['schema']!r}")
        wm = obj["watermark"]
        wm_expected = {
            "block", "band", "chips_per_bit", "amplitude",
            "payload_bits", "recovery_threshold",
        }
        if not isinstance(wm, dict) or set(wm) != wm_expected:
            raise MalformedRecord("bad watermark parameters")
        return cls(
            generated_at=obj["generated_at"],
            planner_model=obj["planner_model"],
            generator_model=obj["generator_model"],
            user_hash=obj["user_hash"],
            digest_algorithm=obj["digest_algorithm"],
            kdf=obj["kdf"],
            digest_pre=obj["digest_pre"],
            digest_post=obj["digest_post"],
            width=obj["width"],
            height=obj["height"],
            chips_per_bit=wm["chips_per_bit"],
            amplitude=wm["amplitude"],
            block=wm["block"],
            band=tuple(wm["band"]),
            config=obj["config"],
            session_id=obj["session_id"],
        )

    @classmethod
    def parse(cls, data: bytes) -> "ProvenanceRecord":
        try:
            return cls.from_json(json.loads(data.decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MalformedRecord(f"bad provenance bytes: {exc}") from None

    def rederive_key(self, salt: str) -> WatermarkKey:
        return derive_key(
            digest=bytes.fromhex(self.digest_pre),
            timestamp=datetime.fromisoformat(self.generated_at),
            salt=salt,
            width=self.width,
            height=self.height,
            chips_per_bit=self.chips_per_bit,
            amplitude=self.amplitude,
        )


def hash_user_id(user_id: str) -> str:
    return hashlib.sha256(user_id.encode("utf-8")).hexdigest()


def write_provenance(
    session_id: str,
    config: PipelineConfig,
    key: WatermarkKey,
    digest_pre: bytes,
    digest_post: bytes,
    timestamp: datetime,
    user_id: str = "anonymous",
) -> ProvenanceRecord:
    """Build the audit record for an embedding; never includes the salt,
    the derived seed, or the raw user identity."""
    return ProvenanceRecord(
        generated_at=timestamp.isoformat(),
        planner_model=config.planner_model,
        generator_model=config.generator_model,
        user_hash=hash_user_id(user_id),
        digest_algorithm=DIGEST_ALGORITHM,
        kdf=KDF_NAME,
        digest_pre=digest_pre.hex(),
        digest_post=digest_post.hex(),
        width=key.width,
        height=key.height,
        chips_per_bit=key.chips_per_bit,
        amplitude=key.amplitude,
        block=key.block,
        band=key.band,
        config=config.to_json(),
        session_id=session_id,
    )
