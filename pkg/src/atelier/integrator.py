"""Scene assembly: layout resolution, alpha compositing, palette
harmonization, and gradient-domain seam blending.

Harmonization backs off its matching strength until the coherence loss is
no worse than before (strength 0 is the identity, so it always succeeds).
Seam blending solves a Poisson equation over a 4 px band around each
foreground boundary with Gauss-Seidel iteration in a fixed sweep order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import lexicon
from .errors import CyclicLayout, MissingPlacement, SolverDiverged
from .generator import Component, render_background
from .image import Image
from .planner import Subtask, SubtaskPlan
from .resample import bilinear_resize

BOX_FRACTION = 0.34  # foreground box side as a share of the scene side
ADJACENCY_DILATION = 2
SEAM_HALF_WIDTH = 2  # band covers +/- 2 px around the boundary
SOLVER_TOL = 1e-6
SOLVER_MAX_ITERS = 10_000
FEATURE_BINS = 16
ORIENT_BINS = 8


@dataclass(frozen=True)
class Placement:
    subtask_id: int
    box: tuple[int, int, int, int]  # x0, y0, w, h in scene pixels
    depth: int


@dataclass
class Layout:
    placements: dict[int, Placement]
    adjacency: set[tuple[int, int]]  # sorted foreground id pairs
    scene_size: int


@dataclass
class Scene:
    image: np.ndarray  # (s, s, 3) float in [0,1]
    layout: Layout
    stage: str  # composited -> harmonized -> blended
    masks: dict[int, np.ndarray] = field(default_factory=dict)  # fg alpha, scene-sized

    def to_image(self) -> Image:
        return Image.from_array(self.image)


def _solve_axis(
    ids: list[int],
    edges: list[tuple[int, int]],
    anchors: dict[int, int],
    what: str,
) -> dict[int, int]:
    """Assign grid indices in [0,2] so every edge (a, b) gets a strictly
    smaller index for `a`. Anchored nodes shift their connected group."""
    nodes = sorted({n for e in edges for n in e})
    out_edges: dict[int, list[int]] = {n: [] for n in nodes}
    indeg: dict[int, int] = {n: 0 for n in nodes}
    for a, b in edges:
        out_edges[a].append(b)
        indeg[b] += 1
    order: list[int] = []
    queue = sorted(n for n in nodes if indeg[n] == 0)
    while queue:
        n = queue.pop(0)
        order.append(n)
        for m in sorted(out_edges[n]):
            indeg[m] -= 1
            if indeg[m] == 0:
                queue.append(m)
                queue.sort()
    if len(order) != len(nodes):
        raise CyclicLayout(f"{what}: contradictory relations")
    level = {n: 0 for n in nodes}
    for n in order:
        for m in out_edges[n]:
            level[m] = max(level[m], level[n] + 1)

    # Connected components share one shift.
    undirected: dict[int, set[int]] = {n: set() for n in nodes}
    for a, b in edges:
        undirected[a].add(b)
        undirected[b].add(a)
    assigned: dict[int, int] = {}
    seen: set[int] = set()
    for start in nodes:
        if start in seen:
            continue
        group = []
        stack = [start]
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            group.append(n)
            stack.extend(undirected[n])
        span = max(level[n] for n in group)
        if span > 2:
            raise CyclicLayout(f"{what}: relation chain needs {span + 1} > 3 grid rows")
        shifts = {anchors[n] - level[n] for n in group if n in anchors}
        if len(shifts) > 1:
            raise CyclicLayout(f"{what}: anchors contradict relations")
        shift = shifts.pop() if shifts else (3 - (span + 1)) // 2
        for n in group:
            idx = level[n] + shift
            if not 0 <= idx <= 2:
                raise CyclicLayout(f"{what}: anchors push relations off the grid")
            assigned[n] = idx
    for n in ids:
        if n not in assigned:
            assigned[n] = anchors.get(n, 1)
    return assigned


def resolve_layout(plan: SubtaskPlan, scene_size: int) -> Layout:
    """Deterministic 3x3-grid placement honoring anchors and relations."""
    fgs = plan.foregrounds
    fg_ids = [s.id for s in fgs]
    anchors_rc = {
        s.id: lexicon.grid_cell_rc(s.layout.anchor)
        for s in fgs
        if s.layout is not None and s.layout.anchor is not None
    }
    vertical: list[tuple[int, int]] = []
    horizontal: list[tuple[int, int]] = []
    over: list[tuple[int, int]] = []
    for s in fgs:
        lc = s.layout
        if lc is None or lc.relation is None:
            continue
        rel, target = lc.relation, lc.relative_to
        if rel == "above":
            vertical.append((s.id, target))
        elif rel == "below":
            vertical.append((target, s.id))
        elif rel == "left-of":
            horizontal.append((s.id, target))
        elif rel == "right-of":
            horizontal.append((target, s.id))
        elif rel == "over":
            over.append((s.id, target))

    rows = _solve_axis(fg_ids, vertical, {i: rc[0] for i, rc in anchors_rc.items()}, "rows")
    cols = _solve_axis(fg_ids, horizontal, {i: rc[1] for i, rc in anchors_rc.items()}, "cols")

    # Spread unconstrained, unanchored foregrounds over distinct cells.
    constrained = {n for e in vertical + horizontal + over for n in e} | set(anchors_rc)
    spread_cells = [(1, 1), (1, 0), (1, 2), (0, 1), (2, 1), (0, 0), (0, 2), (2, 0), (2, 2)]
    free = [i for i in fg_ids if i not in constrained]
    if len(free) > 1:
        for k, sid in enumerate(free):
            rows[sid], cols[sid] = spread_cells[k % len(spread_cells)]

    for sid, target in over:
        rows[sid], cols[sid] = rows[target], cols[target]

    depth = {
        s.id: (s.layout.depth if s.layout is not None else idx + 1)
        for idx, s in enumerate(fgs)
    }
    for _ in range(len(over)):
        for sid, target in over:
            if depth[sid] <= depth[target]:
                depth[sid] = depth[target] + 1

    side = int(round(BOX_FRACTION * scene_size))
    placements: dict[int, Placement] = {}
    bg = plan.background
    min_depth = min(depth.values()) if depth else 1
    if bg is not None:
        placements[bg.id] = Placement(
            subtask_id=bg.id, box=(0, 0, scene_size, scene_size), depth=min_depth - 1
        )
    cell = scene_size / 3.0
    for s in fgs:
        cx = (cols[s.id] + 0.5) * cell
        cy = (rows[s.id] + 0.5) * cell
        x0 = int(round(cx - side / 2.0))
        y0 = int(round(cy - side / 2.0))
        x0 = max(0, min(x0, scene_size - side))
        y0 = max(0, min(y0, scene_size - side))
        placements[s.id] = Placement(subtask_id=s.id, box=(x0, y0, side, side), depth=depth[s.id])

    for s in fgs:
        lc = s.layout
        if lc is None or lc.relation is None:
            continue
        if lc.relation == "above" and rows[s.id] >= rows[lc.relative_to]:
            raise CyclicLayout("resolved grid violates an 'above' relation")
        if lc.relation == "below" and rows[s.id] <= rows[lc.relative_to]:
            raise CyclicLayout("resolved grid violates a 'below' relation")

    adjacency: set[tuple[int, int]] = set()
    d = ADJACENCY_DILATION
    for i, a in enumerate(fg_ids):
        for b in fg_ids[i + 1 :]:
            ax, ay, aw, ah = placements[a].box
            bx, by, bw, bh = placements[b].box
            if (
                ax - d < bx + bw + d
                and bx - d < ax + aw + d
                and ay - d < by + bh + d
                and by - d < ay + ah + d
            ):
                adjacency.add(tuple(sorted((a, b))))
    return Layout(placements=placements, adjacency=adjacency, scene_size=scene_size)


def composite(components: list[Component], layout: Layout, scene_size: int) -> Scene:
    """Back-to-front source-over paint; keeps scaled foreground masks."""
    canvas = np.zeros((scene_size, scene_size, 3))
    masks: dict[int, np.ndarray] = {}
    by_id = {c.subtask_id: c for c in components}
    order = sorted(layout.placements.values(), key=lambda p: (p.depth, p.subtask_id))
    painted_background = False
    for placement in order:
        comp = by_id.get(placement.subtask_id)
        if comp is None:
            raise MissingPlacement(f"no component for subtask {placement.subtask_id}")
        x0, y0, w, h = placement.box
        premult = comp.rgb * comp.alpha[..., None]
        src = bilinear_resize(premult, h, w)
        a = np.clip(bilinear_resize(comp.alpha, h, w), 0.0, 1.0)
        region = canvas[y0 : y0 + h, x0 : x0 + w]
        canvas[y0 : y0 + h, x0 : x0 + w] = src + region * (1.0 - a[..., None])
        if comp.entity_tag == lexicon.BACKGROUND_ENTITY and w == scene_size:
            painted_background = True
        else:
            full = np.zeros((scene_size, scene_size))
            full[y0 : y0 + h, x0 : x0 + w] = a
            masks[placement.subtask_id] = full
    if not painted_background:
        # Plans may drop their background; composite onto the neutral one.
        neutral = render_background(lexicon.DEFAULT_BACKGROUND, scene_size, 0)
        covered = np.zeros((scene_size, scene_size))
        for m in masks.values():
            covered = np.maximum(covered, m)
        canvas = canvas + neutral.rgb * (1.0 - covered[..., None])
    return Scene(
        image=np.clip(canvas, 0.0, 1.0),
        layout=layout,
        stage="composited",
        masks=masks,
    )


# ---------------------------------------------------------------------------
# Features and coherence


def extract_features(
    image: np.ndarray, box: tuple[int, int, int, int], mask: np.ndarray
) -> np.ndarray:
    """56-dim descriptor: 16-bin histogram per channel weighted by opacity
    plus an 8-bin gradient-orientation histogram; L2-normalized."""
    x0, y0, w, h = box
    region = image[y0 : y0 + h, x0 : x0 + w]
    weights = mask[y0 : y0 + h, x0 : x0 + w] if mask.shape == image.shape[:2] else mask
    parts = []
    for c in range(3):
        hist, _ = np.histogram(
            region[..., c], bins=FEATURE_BINS, range=(0.0, 1.0), weights=weights
        )
        parts.append(hist.astype(np.float64))
    luma = 0.299 * region[..., 0] + 0.587 * region[..., 1] + 0.114 * region[..., 2]
    gy, gx = np.gradient(luma)
    magnitude = np.hypot(gx, gy) * weights
    orientation = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
    ghist, _ = np.histogram(
        orientation, bins=ORIENT_BINS, range=(0.0, 2.0 * np.pi), weights=magnitude
    )
    parts.append(ghist.astype(np.float64))
    vec = np.concatenate(parts)
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def scene_features(scene: Scene) -> dict[int, np.ndarray]:
    return {
        sid: extract_features(scene.image, scene.layout.placements[sid].box, mask)
        for sid, mask in sorted(scene.masks.items())
    }


def coherence_loss(
    features: dict[int, np.ndarray], adjacency: set[tuple[int, int]]
) -> float:
    """Sum of squared feature distances over adjacent foreground pairs."""
    total = 0.0
    for a, b in sorted(adjacency):
        diff = features[a] - features[b]
        total += float(np.dot(diff, diff))
    return total


# ---------------------------------------------------------------------------
# Harmonization


def _match_lut(region_hist: np.ndarray, global_cdf: np.ndarray) -> np.ndarray:
    """Monotone 256-entry value mapping from region cdf onto the global cdf."""
    cdf = np.cumsum(region_hist)
    if cdf[-1] == 0:
        return np.arange(256) / 255.0
    cdf = cdf / cdf[-1]
    targets = np.searchsorted(global_cdf, cdf, side="left")
    return np.clip(targets, 0, 255) / 255.0


def harmonize(scene: Scene, strengths: tuple[float, ...] = (1.0, 0.5, 0.25, 0.0)) -> Scene:
    """Pull each foreground's palette toward the whole scene's, backing off
    the matching strength until coherence does not increase."""
    if scene.stage != "composited":
        raise ValueError(f"harmonize expects a composited scene, got {scene.stage}")
    base_features = scene_features(scene)
    base_loss = coherence_loss(base_features, scene.layout.adjacency)
    quant = np.clip((scene.image * 255.0).astype(int), 0, 255)
    global_cdfs = []
    for c in range(3):
        hist = np.bincount(quant[..., c].ravel(), minlength=256).astype(np.float64)
        cdf = np.cumsum(hist)
        global_cdfs.append(cdf / cdf[-1])

    matched = scene.image.copy()
    for sid, mask in sorted(scene.masks.items()):
        opaque = mask > 0.5
        if not opaque.any():
            continue
        for c in range(3):
            values = quant[..., c][opaque]
            hist = np.bincount(values, minlength=256).astype(np.float64)
            lut = _match_lut(hist, global_cdfs[c])
            channel = matched[..., c]
            channel[opaque] = lut[values]

    chosen = scene.image
    for strength in strengths:
        if strength == 0.0:
            candidate = scene.image
        else:
            blend = np.zeros((scene.layout.scene_size, scene.layout.scene_size))
            for mask in scene.masks.values():
                blend = np.maximum(blend, mask)
            factor = (strength * blend)[..., None]
            candidate = scene.image * (1.0 - factor) + matched * factor
        trial = replace(scene, image=candidate, stage="harmonized")
        loss = coherence_loss(scene_features(trial), scene.layout.adjacency)
        if loss <= base_loss + 1e-12:
            chosen = candidate
            break
    return Scene(
        image=np.clip(chosen, 0.0, 1.0),
        layout=scene.layout,
        stage="harmonized",
        masks=scene.masks,
    )


# ---------------------------------------------------------------------------
# Seam blending


def _binary_shift(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = mask[ys_src, xs_src]
    return out


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    out = mask.copy()
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy or dx:
                out |= _binary_shift(mask, dy, dx)
    return out


def _erode(mask: np.ndarray, radius: int) -> np.ndarray:
    out = mask.copy()
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy or dx:
                out &= _binary_shift(mask, dy, dx)
    return out


def seam_band(scene: Scene) -> np.ndarray:
    band = np.zeros((scene.layout.scene_size, scene.layout.scene_size), dtype=bool)
    for mask in scene.masks.values():
        opaque = mask > 0.5
        if opaque.any():
            band |= _dilate(opaque, SEAM_HALF_WIDTH) & ~_erode(opaque, SEAM_HALF_WIDTH)
    return band


def _guidance(channel: np.ndarray, crossing: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Oriented edge gradients; seam-crossing edges get the mean of the
    parallel gradients one step to each side."""
    h, w = channel.shape
    gx = np.zeros((h, w - 1))
    gx[:, :] = channel[:, 1:] - channel[:, :-1]
    cross_x = crossing[:, 1:] != crossing[:, :-1]
    left = np.zeros_like(gx)
    left[:, 1:] = channel[:, 1:-1] - channel[:, :-2]
    right = np.zeros_like(gx)
    right[:, :-1] = channel[:, 2:] - channel[:, 1:-1]
    n = np.ones_like(gx)
    n[:, 1:] += 1
    n[:, :-1] += 1
    n -= 1  # count of available side gradients (1 at edges, 2 inside)
    gx = np.where(cross_x, (left + right) / np.maximum(n, 1), gx)

    gy = np.zeros((h - 1, w))
    gy[:, :] = channel[1:, :] - channel[:-1, :]
    cross_y = crossing[1:, :] != crossing[:-1, :]
    up = np.zeros_like(gy)
    up[1:, :] = channel[1:-1, :] - channel[:-2, :]
    down = np.zeros_like(gy)
    down[:-1, :] = channel[2:, :] - channel[1:-1, :]
    m = np.ones_like(gy)
    m[1:, :] += 1
    m[:-1, :] += 1
    m -= 1
    gy = np.where(cross_y, (up + down) / np.maximum(m, 1), gy)
    return gx, gy


def _neighbor_values(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[p] = arr[p + (dy, dx)], zero where the neighbor is off-image."""
    out = np.zeros_like(arr)
    h, w = arr.shape[:2]
    ys_dst = slice(max(-dy, 0), h - max(dy, 0))
    xs_dst = slice(max(-dx, 0), w - max(dx, 0))
    ys_src = slice(max(dy, 0), h - max(-dy, 0))
    xs_src = slice(max(dx, 0), w - max(-dx, 0))
    out[ys_dst, xs_dst] = arr[ys_src, xs_src]
    return out


def poisson_system(
    channel: np.ndarray, band: np.ndarray, opaque: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Assemble degree[p]*f[p] - sum_{q in band} f[q] = b[p] over the band.

    Dirichlet values from the composite are folded into b; neighbors past
    the image border are dropped from the stencil entirely.
    """
    h, w = channel.shape
    gx, gy = _guidance(channel, opaque)
    b = np.zeros((h, w))
    degree = np.zeros((h, w))
    for (dy, dx) in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        grad = np.zeros((h, w))  # g oriented p -> q, q = p + d
        nb_exists = np.zeros((h, w), dtype=bool)
        if (dy, dx) == (0, 1):
            grad[:, : w - 1] = gx
            nb_exists[:, : w - 1] = True
        elif (dy, dx) == (0, -1):
            grad[:, 1:] = -gx
            nb_exists[:, 1:] = True
        elif (dy, dx) == (1, 0):
            grad[: h - 1, :] = gy
            nb_exists[: h - 1, :] = True
        else:
            grad[1:, :] = -gy
            nb_exists[1:, :] = True
        within = band & nb_exists
        degree += within
        b -= np.where(within, grad, 0.0)
        q_in_band = _neighbor_values(band.astype(np.float64), dy, dx) > 0
        dirichlet = within & ~q_in_band
        b += np.where(dirichlet, _neighbor_values(channel, dy, dx), 0.0)
    return b, degree


def _band_neighbor_sum(values: np.ndarray, band: np.ndarray) -> np.ndarray:
    total = np.zeros_like(values)
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        shifted = _neighbor_values(values, dy, dx)
        nb_band = _neighbor_values(band.astype(np.float64), dy, dx) > 0
        total += np.where(nb_band, shifted, 0.0)
    return total


def gauss_seidel_band(
    channel: np.ndarray,
    band: np.ndarray,
    b: np.ndarray,
    degree: np.ndarray,
    tol: float = SOLVER_TOL,
    max_iters: int = SOLVER_MAX_ITERS,
) -> np.ndarray:
    """Red-black Gauss-Seidel over the band; fixed sweep order."""
    h, w = channel.shape
    f = channel.copy()
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    red = band & ((ii + jj) % 2 == 0)
    black = band & ((ii + jj) % 2 == 1)
    deg = np.maximum(degree, 1.0)
    for _ in range(max_iters):
        for color in (red, black):
            nsum = _band_neighbor_sum(f, band)
            f = np.where(color, (b + nsum) / deg, f)
        residual = degree * f - _band_neighbor_sum(f, band) - b
        err = float(np.max(np.abs(residual[band]))) if band.any() else 0.0
        if not np.isfinite(err):
            raise SolverDiverged(f"residual became {err}")
        if err < tol:
            break
    return f


def blend_seams(scene: Scene) -> Scene:
    """Poisson-blend the seam band; pixels outside the band are untouched."""
    if scene.stage != "harmonized":
        raise ValueError(f"blend_seams expects a harmonized scene, got {scene.stage}")
    band = seam_band(scene)
    if not band.any():
        return Scene(image=scene.image.copy(), layout=scene.layout, stage="blended", masks=scene.masks)
    opaque = np.zeros_like(band)
    for mask in scene.masks.values():
        opaque |= mask > 0.5
    out = scene.image.copy()
    for c in range(3):
        channel = scene.image[..., c]
        b, degree = poisson_system(channel, band, opaque)
        f = gauss_seidel_band(channel, band, b, degree)
        out[..., c] = np.where(band, np.clip(f, 0.0, 1.0), channel)
    return Scene(image=out, layout=scene.layout, stage="blended", masks=scene.masks)
