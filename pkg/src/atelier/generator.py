"""Procedural component renderer: one deterministic RGBA glyph per subtask.

Every entity maps to a fixed multi-primitive glyph (ellipses and polygons
in a unit frame); attributes modulate hue, scale, and orientation, and the
seed adds small jitter so regeneration produces a genuinely different
image. Backgrounds are vertical gradients keyed by palette. Values stay
inside [0.08, 0.92] so later watermark perturbations do not clip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import lexicon
from .errors import RetriesExhausted, UnknownEntity
from .image import Image
from .planner import Subtask


@dataclass(frozen=True)
class GeneratorParams:
    """Sampler settings; the procedural path records them but only uses
    `resolution`. They are forwarded verbatim to external backends."""

    steps: int = 50
    guidance_scale: float = 7.5
    resolution: int = 128
    negative_prompt: str = "blurry, distorted, low quality"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale <= 0:
            raise ValueError("guidance_scale must be > 0")
        if self.resolution < 32:
            raise ValueError("resolution must be >= 32")


@dataclass
class Component:
    """One generated element: RGB raster plus alpha mask and retry history."""

    subtask_id: int
    rgb: np.ndarray
    alpha: np.ndarray
    seed_used: int
    attempt: int = 0
    score: float | None = None
    entity_tag: str = ""

    @property
    def image(self) -> Image:
        return Image.from_array(self.rgb)

    @property
    def resolution(self) -> int:
        return self.rgb.shape[0]


# ---------------------------------------------------------------------------
# Glyph table. Parts are drawn in order in a [-0.5, 0.5]^2 frame (y down);
# each part carries a value factor applied to the base color.

def _rect(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def _star_points(outer=0.48, inner=0.19, n=5, start_deg=-90.0):
    pts = []
    for k in range(2 * n):
        r = outer if k % 2 == 0 else inner
        a = math.radians(start_deg + 180.0 * k / n)
        pts.append((r * math.cos(a), r * math.sin(a)))
    return pts


def _sun_parts():
    parts = [("ellipse", (0.0, 0.0, 0.26, 0.26), 1.1)]
    for k in range(8):
        a = math.radians(45.0 * k)
        ca, sa = math.cos(a), math.sin(a)
        base1 = (0.30 * ca - 0.06 * sa, 0.30 * sa + 0.06 * ca)
        base2 = (0.30 * ca + 0.06 * sa, 0.30 * sa - 0.06 * ca)
        apex = (0.48 * ca, 0.48 * sa)
        parts.append(("poly", [base1, apex, base2], 0.95))
    return parts


GLYPHS: dict[str, list[tuple]] = {
    "dragon": [
        ("ellipse", (0.0, 0.05, 0.30, 0.14), 1.0),
        ("ellipse", (0.33, -0.02, 0.10, 0.08), 1.05),
        ("ellipse", (0.42, 0.00, 0.05, 0.035), 0.95),
        ("ellipse", (-0.33, 0.10, 0.07, 0.05), 0.9),
        ("ellipse", (-0.42, 0.16, 0.05, 0.035), 0.85),
        ("ellipse", (-0.48, 0.22, 0.03, 0.02), 0.8),
        ("poly", [(-0.05, -0.02), (-0.28, -0.42), (0.10, -0.10)], 0.8),
        ("poly", [(0.02, -0.02), (0.25, -0.38), (0.12, -0.05)], 0.72),
    ],
    "castle": [
        ("poly", _rect(-0.18, -0.10, 0.18, 0.45), 1.0),
        ("poly", _rect(-0.34, -0.28, -0.16, 0.45), 0.9),
        ("poly", _rect(0.16, -0.28, 0.34, 0.45), 0.9),
        ("poly", [(-0.37, -0.28), (-0.25, -0.46), (-0.13, -0.28)], 0.75),
        ("poly", [(0.13, -0.28), (0.25, -0.46), (0.37, -0.28)], 0.75),
        ("poly", _rect(-0.16, -0.16, -0.08, -0.10), 0.85),
        ("poly", _rect(-0.04, -0.16, 0.04, -0.10), 0.85),
        ("poly", _rect(0.08, -0.16, 0.16, -0.10), 0.85),
        ("ellipse", (0.0, 0.38, 0.07, 0.10), 0.45),
    ],
    "tree": [
        ("poly", _rect(-0.04, 0.10, 0.04, 0.48), 0.55),
        ("ellipse", (0.0, -0.10, 0.26, 0.22), 1.0),
        ("ellipse", (-0.16, 0.02, 0.18, 0.15), 0.9),
        ("ellipse", (0.16, 0.02, 0.18, 0.15), 0.85),
    ],
    "mountain": [
        ("poly", [(-0.48, 0.46), (0.0, -0.46), (0.48, 0.46)], 0.9),
        ("poly", [(0.05, 0.46), (0.30, -0.10), (0.48, 0.46)], 0.75),
        ("poly", [(-0.12, -0.22), (0.0, -0.46), (0.12, -0.22)], 1.3),
    ],
    "sun": _sun_parts(),
    "moon": [("crescent", (0.0, 0.0, 0.30, 0.13, -0.05, 0.27), 1.05)],
    "cloud": [
        ("ellipse", (-0.18, 0.06, 0.16, 0.11), 1.0),
        ("ellipse", (0.02, 0.00, 0.20, 0.14), 1.05),
        ("ellipse", (0.22, 0.07, 0.15, 0.10), 0.95),
        ("ellipse", (0.0, -0.10, 0.14, 0.10), 1.1),
    ],
    "star": [("poly", _star_points(), 1.0)],
    "bird": [
        ("poly", [(-0.42, -0.05), (-0.02, -0.22), (-0.02, -0.06)], 0.95),
        ("poly", [(0.42, -0.05), (0.02, -0.22), (0.02, -0.06)], 0.9),
        ("ellipse", (0.0, -0.04, 0.09, 0.06), 1.05),
    ],
    "house": [
        ("poly", _rect(-0.25, -0.05, 0.25, 0.42), 1.0),
        ("poly", [(-0.32, -0.05), (0.0, -0.42), (0.32, -0.05)], 0.8),
        ("poly", _rect(-0.06, 0.20, 0.06, 0.42), 0.5),
        ("poly", _rect(0.10, 0.05, 0.20, 0.15), 1.3),
    ],
    "boat": [
        ("poly", [(-0.35, 0.15), (0.35, 0.15), (0.22, 0.35), (-0.22, 0.35)], 0.85),
        ("poly", _rect(-0.015, -0.35, 0.015, 0.15), 0.6),
        ("poly", [(0.02, -0.33), (0.30, 0.05), (0.02, 0.10)], 1.1),
    ],
    "circle": [("ellipse", (0.0, 0.0, 0.45, 0.45), 1.0)],
}

def _part_bbox(kind, geom):
    if kind == "ellipse":
        cx, cy, rx, ry = geom
        return cx - rx, cy - ry, cx + rx, cy + ry
    if kind == "crescent":
        cx, cy, rr = geom[0], geom[1], geom[2]
        return cx - rr, cy - rr, cx + rr, cy + rr
    xs = [p[0] for p in geom]
    ys = [p[1] for p in geom]
    return min(xs), min(ys), max(xs), max(ys)


def _glyph_extent(parts) -> float:
    boxes = [_part_bbox(kind, geom) for kind, geom, _ in parts]
    x0 = min(b[0] for b in boxes)
    y0 = min(b[1] for b in boxes)
    x1 = max(b[2] for b in boxes)
    y1 = max(b[3] for b in boxes)
    return max(x1 - x0, y1 - y0)


# Nominal glyph-frame span per entity; lets size be measured from an
# observed bounding box independent of glyph shape.
GLYPH_EXTENT: dict[str, float] = {name: _glyph_extent(parts) for name, parts in GLYPHS.items()}

_DEFAULT_COLOR = {
    "dragon": "green", "castle": "gold", "tree": "green", "mountain": "violet",
    "sun": "gold", "moon": "gold", "cloud": "cyan", "star": "gold",
    "bird": "blue", "house": "orange", "boat": "blue", "circle": "blue",
}
_BASE_VALUE = {
    "dragon": 0.62, "castle": 0.72, "tree": 0.55, "mountain": 0.60,
    "sun": 0.88, "moon": 0.85, "cloud": 0.88, "star": 0.85,
    "bird": 0.52, "house": 0.70, "boat": 0.60, "circle": 0.70,
}
_SATURATION = {"cloud": 0.35, "moon": 0.45, "sun": 0.75}

_POSE_ANGLE = {"flying": -12.0, "soaring": -22.0, "floating": 6.0}
_POSE_SQUASH = {"sitting": 0.8, "sleeping": 0.55}


def _poly_mask(gx: np.ndarray, gy: np.ndarray, verts) -> np.ndarray:
    """Even-odd crossing test, vectorized over the pixel grid."""
    inside = np.zeros(gx.shape, dtype=bool)
    n = len(verts)
    for k in range(n):
        x1, y1 = verts[k]
        x2, y2 = verts[(k + 1) % n]
        crosses = (y1 > gy) != (y2 > gy)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (gy - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (gx < xint)
    return inside


def _ellipse_mask(gx, gy, cx, cy, rx, ry):
    return ((gx - cx) / rx) ** 2 + ((gy - cy) / ry) ** 2 <= 1.0


def render_background(palette: str, resolution: int, seed: int) -> Component:
    if palette not in lexicon.BACKGROUND_PALETTES:
        raise UnknownEntity(f"unknown background palette {palette!r}")
    top, bottom = lexicon.BACKGROUND_PALETTES[palette]
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0x5EED])
    bend = 1.0 + 0.1 * float(rng.uniform(-1.0, 1.0))
    t = (np.arange(resolution) / max(resolution - 1, 1)) ** bend
    grad = (1.0 - t)[:, None] * np.array(top) + t[:, None] * np.array(bottom)
    rgb = np.repeat(grad[:, None, :], resolution, axis=1)
    return Component(
        subtask_id=-1,
        rgb=rgb,
        alpha=np.ones((resolution, resolution)),
        seed_used=seed,
        entity_tag=lexicon.BACKGROUND_ENTITY,
    )


def generate(subtask: Subtask, seed: int, params: GeneratorParams) -> Component:
    """Render a component; deterministic for (subtask, seed, params)."""
    res = params.resolution
    if subtask.kind == "background":
        palette = subtask.attributes.get("palette", lexicon.DEFAULT_BACKGROUND)
        comp = render_background(palette, res, seed)
        comp.subtask_id = subtask.id
        return comp

    entity = subtask.entity
    if entity not in GLYPHS:
        raise UnknownEntity(f"no glyph for entity {entity!r}")
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, subtask.id])

    color = subtask.attributes.get("color", _DEFAULT_COLOR[entity])
    if color not in lexicon.COLOR_RANGES:
        color = _DEFAULT_COLOR[entity]
    lo, hi = lexicon.COLOR_RANGES[color]
    halfwidth = ((hi - lo) % 360.0) / 2.0
    hue = lexicon.color_center_hue(color) + float(rng.uniform(-0.6, 0.6)) * halfwidth
    saturation = _SATURATION.get(entity, 0.85)
    base_value = _BASE_VALUE[entity] * (1.0 + 0.05 * float(rng.uniform(-1, 1)))

    size = subtask.attributes.get("size", "medium")
    extent = lexicon.SIZE_EXTENT.get(size, lexicon.SIZE_EXTENT["medium"])
    scale = extent * (1.0 + 0.04 * float(rng.uniform(-1, 1)))

    pose = subtask.attributes.get("pose")
    angle = _POSE_ANGLE.get(pose, 0.0) + 3.0 * float(rng.uniform(-1, 1))
    squash = _POSE_SQUASH.get(pose, 1.0)

    cx = 0.5 + 0.02 * float(rng.uniform(-1, 1))
    cy = 0.5 + 0.02 * float(rng.uniform(-1, 1))

    # Pixel centers -> glyph frame (rotate, then unscale and unsquash).
    coords = (np.arange(res) + 0.5) / res
    xx, yy = np.meshgrid(coords, coords)
    rad = math.radians(angle)
    ca, sa = math.cos(rad), math.sin(rad)
    gx = ((xx - cx) * ca + (yy - cy) * sa) / scale
    gy = (-(xx - cx) * sa + (yy - cy) * ca) / (scale * squash)

    rgb = np.zeros((res, res, 3))
    alpha = np.zeros((res, res))
    for kind, geom, value_factor in GLYPHS[entity]:
        if kind == "ellipse":
            mask = _ellipse_mask(gx, gy, *geom)
        elif kind == "poly":
            mask = _poly_mask(gx, gy, geom)
        elif kind == "crescent":
            ocx, ocy, orr, icx, icy, irr = geom
            mask = _ellipse_mask(gx, gy, ocx, ocy, orr, orr) & ~_ellipse_mask(
                gx, gy, icx, icy, irr, irr
            )
        else:  # pragma: no cover - table is static
            raise UnknownEntity(f"bad primitive kind {kind!r}")
        value = float(np.clip(base_value * value_factor, 0.15, 0.92))
        rgb[mask] = lexicon.hsv_to_rgb(hue, saturation, value)
        alpha[mask] = 1.0
    rgb = np.clip(rgb, 0.08, 0.92) * alpha[..., None]
    return Component(
        subtask_id=subtask.id,
        rgb=rgb,
        alpha=alpha,
        seed_used=seed,
        attempt=0,
        entity_tag=entity,
    )


def regenerate(
    component: Component, subtask: Subtask, params: GeneratorParams, max_retries: int
) -> Component:
    """New attempt with a shifted seed; raises once retries are exhausted."""
    if component.attempt >= max_retries:
        raise RetriesExhausted(
            f"subtask {subtask.id} used all {max_retries} retries"
        )
    fresh = generate(subtask, component.seed_used + 1, params)
    fresh.attempt = component.attempt + 1
    return fresh
