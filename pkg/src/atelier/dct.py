"""Orthonormal 8x8 type-II DCT and blockwise helpers.

Transforms are realized as basis-matrix products, C @ X @ C.T, with C the
orthonormal DCT-II matrix. idct8(dct8(x)) == x and energy is preserved to
float precision, which the watermark correlation math relies on.
"""

from __future__ import annotations

import numpy as np

BLOCK = 8

# C[u, x] = a_u * cos((2x+1) u pi / 16), a_0 = sqrt(1/8), a_u = 1/2 otherwise.
_x = np.arange(BLOCK)
_u = np.arange(BLOCK)[:, None]
_C = np.cos((2 * _x + 1) * _u * np.pi / (2 * BLOCK)) * np.sqrt(2.0 / BLOCK)
_C[0, :] /= np.sqrt(2.0)
_C.setflags(write=False)

# Zig-zag scan order: ZIGZAG[k] = (row, col) of the k-th coefficient.
ZIGZAG: list[tuple[int, int]] = []
for s in range(2 * BLOCK - 1):
    diag = [(i, s - i) for i in range(max(0, s - 7), min(s, 7) + 1)]
    ZIGZAG.extend(diag if s % 2 else diag[::-1])


def dct8(block: np.ndarray) -> np.ndarray:
    """2-D orthonormal DCT-II of one 8x8 block."""
    return _C @ np.asarray(block, dtype=np.float64) @ _C.T


def idct8(coeffs: np.ndarray) -> np.ndarray:
    """Inverse of dct8."""
    return _C.T @ np.asarray(coeffs, dtype=np.float64) @ _C


def to_blocks(plane: np.ndarray) -> np.ndarray:
    """(h, w) plane -> (nby, nbx, 8, 8) view-copy; h, w must be multiples of 8."""
    h, w = plane.shape
    if h % BLOCK or w % BLOCK:
        raise ValueError(f"plane {h}x{w} not block aligned")
    return (
        plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK)
        .transpose(0, 2, 1, 3)
        .copy()
    )


def from_blocks(blocks: np.ndarray) -> np.ndarray:
    nby, nbx, _, _ = blocks.shape
    return blocks.transpose(0, 2, 1, 3).reshape(nby * BLOCK, nbx * BLOCK)


def dct_blocks(plane: np.ndarray) -> np.ndarray:
    """Blockwise forward DCT of a block-aligned plane, vectorized over blocks."""
    blocks = to_blocks(plane)
    return np.einsum("ux,ijxy,vy->ijuv", _C, blocks, _C, optimize=True)


def idct_blocks(coeffs: np.ndarray) -> np.ndarray:
    blocks = np.einsum("ux,ijuv,vy->ijxy", _C, coeffs, _C, optimize=True)
    return from_blocks(blocks)


def reflect_pad_to_block(plane: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad the bottom/right edges up to multiples of 8.

    Returns the padded plane and the original (h, w) so callers can crop back.
    """
    h, w = plane.shape
    ph = (-h) % BLOCK
    pw = (-w) % BLOCK
    if ph or pw:
        plane = np.pad(plane, ((0, ph), (0, pw)), mode="reflect")
    return plane, (h, w)
