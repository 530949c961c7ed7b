"""Alignment scoring and the threshold gate with regeneration.

The stub scorer compares an expected attribute vector (hue-range one-hot,
size one-hot, entity one-hot) against a measured one (hue histogram of
opaque pixels, bounding-box size membership, rendered entity tag) by
weighted cosine similarity. Hue carries double weight so a wrong color
lands clearly below the default gate while a right one clears it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import lexicon
from .errors import SessionFailure
from .generator import GLYPH_EXTENT, Component
from .planner import PromptText, Subtask
from .session import ReviewPolicy

_HUE_WEIGHT = 2.0
_ENTITY_SPACE = tuple(lexicon.ENTITIES) + (lexicon.BACKGROUND_ENTITY,)
_SIZE_CENTERS = {name: ext for name, ext in lexicon.SIZE_EXTENT.items()}
_SIZE_WIDTH = 0.17


@dataclass(frozen=True)
class AlignmentScore:
    value: float
    scorer: str = "stub"
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError("alignment score must be in [0,1]")


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), 0.0, 1.0))


def _size_membership(measured_scale: float) -> np.ndarray:
    out = np.array(
        [
            max(0.0, 1.0 - abs(measured_scale - _SIZE_CENTERS[s]) / _SIZE_WIDTH)
            for s in lexicon.SIZES
        ]
    )
    total = out.sum()
    return out / total if total > 0 else out


def _measure(component: Component) -> dict:
    opaque = component.alpha > 0.5
    n_opaque = int(opaque.sum())
    meas: dict = {"opaque": n_opaque}
    if n_opaque == 0:
        meas["hue_hist"] = np.zeros(len(lexicon.COLOR_NAMES))
        meas["scale"] = 0.0
        return meas
    hues = lexicon.rgb_to_hue_deg(component.rgb[opaque])
    meas["hue_hist"] = lexicon.hue_histogram(hues)
    rows = np.any(opaque, axis=1)
    cols = np.any(opaque, axis=0)
    span = max(
        int(np.max(np.nonzero(rows)) - np.min(np.nonzero(rows))) + 1,
        int(np.max(np.nonzero(cols)) - np.min(np.nonzero(cols))) + 1,
    )
    nominal = GLYPH_EXTENT.get(component.entity_tag, 1.0)
    meas["scale"] = span / component.resolution / nominal
    return meas


def _has_artifacts(component: Component) -> bool:
    # Clipping/NaN detector only: broken math or a blown-out render.
    if not np.isfinite(component.rgb).all() or not np.isfinite(component.alpha).all():
        return True
    opaque = component.alpha > 0.5
    if not opaque.any():
        return False
    samples = component.rgb[opaque]
    saturated = (samples <= 0.0) | (samples >= 1.0)
    return bool(saturated.mean() > 0.95)


def score(component: Component, prompt: PromptText, subtask: Subtask) -> AlignmentScore:
    """Deterministic stub alignment score in [0,1]."""
    meas = _measure(component)
    expected_parts: list[np.ndarray] = []
    measured_parts: list[np.ndarray] = []

    hue_names: Iterable[str] = ()
    if subtask.kind == "background":
        palette = subtask.attributes.get("palette", lexicon.DEFAULT_BACKGROUND)
        hue_names = lexicon.BACKGROUND_HUES.get(palette, ())
    elif "color" in subtask.attributes:
        hue_names = (subtask.attributes["color"],)
    if hue_names:
        one_hot = np.array(
            [1.0 if name in hue_names else 0.0 for name in lexicon.COLOR_NAMES]
        )
        one_hot /= np.linalg.norm(one_hot)
        expected_parts.append(_HUE_WEIGHT * one_hot)
        measured_parts.append(_HUE_WEIGHT * meas["hue_hist"])

    if subtask.kind == "foreground" and "size" in subtask.attributes:
        size = subtask.attributes["size"]
        expected_parts.append(
            np.array([1.0 if s == size else 0.0 for s in lexicon.SIZES])
        )
        measured_parts.append(_size_membership(meas["scale"]))

    entity_expected = np.array(
        [1.0 if e == subtask.entity else 0.0 for e in _ENTITY_SPACE]
    )
    entity_measured = np.array(
        [1.0 if e == component.entity_tag else 0.0 for e in _ENTITY_SPACE]
    )
    if meas["opaque"] == 0:
        entity_measured[:] = 0.0  # nothing rendered counts as absent
    expected_parts.append(entity_expected)
    measured_parts.append(entity_measured)

    value = cosine_similarity(
        np.concatenate(expected_parts), np.concatenate(measured_parts)
    )
    attr_dims = sum(p.size for p in expected_parts[:-1])
    attribute_match = (
        cosine_similarity(
            np.concatenate(expected_parts[:-1]), np.concatenate(measured_parts[:-1])
        )
        if attr_dims
        else 1.0
    )
    artifacts = _has_artifacts(component)
    if artifacts:
        value = min(value, 0.2)
    return AlignmentScore(
        value=value,
        scorer="stub",
        details={
            "object_presence": float(np.dot(entity_expected, entity_measured)),
            "attribute_match": attribute_match,
            "artifact_flag": artifacts,
        },
    )


@dataclass
class ComponentReview:
    subtask_id: int
    attempts: int
    final_score: float
    passed: bool
    accepted_by_policy: bool = False
    overridden: bool = False


@dataclass
class ReviewReport:
    per_component: list[ComponentReview]
    loss: float
    overridden: set[int] = field(default_factory=set)


def review_loss(scores: Iterable[float], tau: float) -> float:
    """Hinge penalty: sum of max(0, tau - s)."""
    return float(sum(max(0.0, tau - s) for s in scores))


def review_gate(
    components: list[Component],
    subtasks: dict[int, Subtask],
    prompt: PromptText,
    tau: float,
    max_retries: int,
    regen: Callable[[Component, Subtask], Component],
    policy: ReviewPolicy = ReviewPolicy.ACCEPT_BEST,
    skip_gate: bool = False,
    scorer: Callable[[Component, PromptText, Subtask], AlignmentScore] = score,
    notify: Callable[[str, dict], None] | None = None,
) -> tuple[ReviewReport, list[Component]]:
    """Score every component and regenerate the ones below `tau`.

    Keeps the best-scoring attempt per component. `regen` is expected to
    emit its own generation notice; `notify` receives review notices in
    event order. With `skip_gate` every component passes unscathed.
    """

    def emit(kind: str, payload: dict):
        if notify is not None:
            notify(kind, payload)

    reviews: list[ComponentReview] = []
    finals: list[Component] = []
    for comp in sorted(components, key=lambda c: c.subtask_id):
        subtask = subtasks[comp.subtask_id]
        current = comp
        current_score = scorer(current, prompt, subtask)
        emit(
            "ReviewScored",
            {
                "subtask_id": comp.subtask_id,
                "attempt": current.attempt,
                "score": current_score.value,
                "passed": skip_gate or current_score.value >= tau,
                "details": dict(current_score.details),
            },
        )
        best, best_score = current, current_score
        attempts = 1
        if not skip_gate:
            while best_score.value < tau:
                if current.attempt >= max_retries:
                    break
                emit(
                    "RegenerationTriggered",
                    {
                        "subtask_id": comp.subtask_id,
                        "attempt": current.attempt + 1,
                        "reason": f"score {current_score.value:.4f} < {tau}",
                    },
                )
                current = regen(current, subtask)
                current_score = scorer(current, prompt, subtask)
                attempts += 1
                emit(
                    "ReviewScored",
                    {
                        "subtask_id": comp.subtask_id,
                        "attempt": current.attempt,
                        "score": current_score.value,
                        "passed": current_score.value >= tau,
                        "details": dict(current_score.details),
                    },
                )
                if current_score.value > best_score.value:
                    best, best_score = current, current_score
        passed = skip_gate or best_score.value >= tau
        accepted_by_policy = False
        if not passed:
            if policy is ReviewPolicy.STRICT:
                raise SessionFailure(
                    f"subtask {comp.subtask_id} stuck at "
                    f"{best_score.value:.4f} < {tau} after {attempts} attempts"
                )
            passed = True
            accepted_by_policy = True
        best.score = best_score.value
        finals.append(best)
        reviews.append(
            ComponentReview(
                subtask_id=comp.subtask_id,
                attempts=attempts,
                final_score=best_score.value,
                passed=passed,
                accepted_by_policy=accepted_by_policy,
            )
        )
    loss = review_loss([r.final_score for r in reviews], tau)
    return ReviewReport(per_component=reviews, loss=loss), finals
