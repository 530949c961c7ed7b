"""Controlled vocabulary shared by the planner, generator, and reviewer.

Color terms map to disjoint hue ranges covering the full wheel, so a hue
histogram binned by these ranges doubles as the reviewer's measurement
space. Background palettes stay inside [0.08, 0.92] to leave headroom for
the watermark perturbation before clamping.
"""

from __future__ import annotations

import numpy as np

# name -> [lo, hi) hue range in degrees; "red" wraps through 0.
COLOR_RANGES: dict[str, tuple[float, float]] = {
    "red": (350.0, 10.0),
    "orange": (10.0, 40.0),
    "gold": (40.0, 55.0),
    "yellow": (55.0, 75.0),
    "lime": (75.0, 105.0),
    "green": (105.0, 150.0),
    "teal": (150.0, 180.0),
    "cyan": (180.0, 205.0),
    "blue": (205.0, 250.0),
    "violet": (250.0, 290.0),
    "magenta": (290.0, 325.0),
    "pink": (325.0, 350.0),
}
COLOR_NAMES = list(COLOR_RANGES)

SIZES = ("small", "medium", "large")
SIZE_EXTENT = {"small": 0.45, "medium": 0.62, "large": 0.82}

POSES = ("flying", "soaring", "standing", "sitting", "sleeping", "floating")

RELATIONS = ("above", "below", "left-of", "right-of", "over")

ENTITIES = (
    "dragon", "castle", "tree", "mountain", "sun", "moon",
    "cloud", "star", "bird", "house", "boat", "circle",
)

BACKGROUND_WORDS = {"sunset": "sunset", "night": "night", "noon": "noon"}
BACKGROUND_ENTITY = "sky"
DEFAULT_BACKGROUND = "plain"

# palette -> (top RGB, bottom RGB) for the vertical gradient.
BACKGROUND_PALETTES: dict[str, tuple[tuple[float, float, float], tuple[float, float, float]]] = {
    "sunset": ((0.92, 0.55, 0.18), (0.38, 0.16, 0.32)),
    "night": ((0.10, 0.12, 0.30), (0.08, 0.08, 0.14)),
    "noon": ((0.48, 0.70, 0.92), (0.78, 0.88, 0.92)),
    "plain": ((0.72, 0.75, 0.80), (0.88, 0.88, 0.90)),
}

# palette -> color terms the reviewer accepts for that background.
BACKGROUND_HUES: dict[str, tuple[str, ...]] = {
    "sunset": ("red", "orange", "gold"),
    "night": ("blue", "violet"),
    "noon": ("blue", "cyan"),
    "plain": (),
}

GRID_CELLS = (
    "upper-left", "upper-center", "upper-right",
    "middle-left", "center", "middle-right",
    "lower-left", "lower-center", "lower-right",
)


def grid_cell_rc(name: str) -> tuple[int, int]:
    idx = GRID_CELLS.index(name)
    return idx // 3, idx % 3


def color_center_hue(name: str) -> float:
    """Center of a color term's hue range, in degrees."""
    lo, hi = COLOR_RANGES[name]
    if lo > hi:  # wraps through 0
        center = (lo + hi + 360.0) / 2.0 % 360.0
    else:
        center = (lo + hi) / 2.0
    return center


def hue_in_range(hue_deg: np.ndarray, name: str) -> np.ndarray:
    lo, hi = COLOR_RANGES[name]
    h = np.mod(hue_deg, 360.0)
    if lo > hi:
        return (h >= lo) | (h < hi)
    return (h >= lo) & (h < hi)


def rgb_to_hue_deg(rgb: np.ndarray) -> np.ndarray:
    """Vectorized hue in degrees for an (..., 3) array; 0 where achromatic."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = np.max(rgb, axis=-1)
    mn = np.min(rgb, axis=-1)
    delta = mx - mn
    hue = np.zeros_like(mx)
    with np.errstate(invalid="ignore", divide="ignore"):
        hr = np.mod((g - b) / delta, 6.0)
        hg = (b - r) / delta + 2.0
        hb = (r - g) / delta + 4.0
    chromatic = delta > 1e-12
    hue = np.where(chromatic & (mx == r), hr, hue)
    hue = np.where(chromatic & (mx == g) & (mx != r), hg, hue)
    hue = np.where(chromatic & (mx == b) & (mx != r) & (mx != g), hb, hue)
    return np.nan_to_num(hue * 60.0, nan=0.0)


def hsv_to_rgb(h_deg: float, s: float, v: float) -> np.ndarray:
    """Scalar HSV -> RGB triple, h in degrees."""
    h = (h_deg % 360.0) / 60.0
    i = int(h) % 6
    f = h - int(h)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    rgb = [
        (v, t, p), (q, v, p), (p, v, t),
        (p, q, v), (t, p, v), (v, p, q),
    ][i]
    return np.array(rgb)


def hue_histogram(hues_deg: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Mass per color term, L1-normalized (zeros if no weight)."""
    out = np.zeros(len(COLOR_NAMES))
    if hues_deg.size == 0:
        return out
    w = np.ones_like(hues_deg) if weights is None else weights
    for i, name in enumerate(COLOR_NAMES):
        out[i] = float(np.sum(w[hue_in_range(hues_deg, name)]))
    total = out.sum()
    return out / total if total > 0 else out
