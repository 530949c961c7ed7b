"""Bilinear resampling shared by the integrator and the attack harness."""

from __future__ import annotations

import numpy as np


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (h, w) or (h, w, c) with the half-pixel-center convention.

    Factor 1.0 reproduces the input exactly; constant inputs are exact at
    any factor.
    """
    in_h, in_w = arr.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return arr.copy()
    src_y = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    src_x = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(src_y).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(src_x).astype(int), 0, in_w - 1)
    y1 = np.clip(y0 + 1, 0, in_h - 1)
    x1 = np.clip(x0 + 1, 0, in_w - 1)
    fy = np.clip(src_y - y0, 0.0, 1.0)[:, None]
    fx = np.clip(src_x - x0, 0.0, 1.0)[None, :]
    if arr.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy
