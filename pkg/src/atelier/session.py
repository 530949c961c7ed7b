"""Session state machine, event log, pipeline configuration, and metrics.

The event log is the single source of truth: `SessionRecord.state` is a
cache derived by folding events through the transition table, so a session
can always be reconstructed by replaying its log.
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum

from .errors import IllegalTransition, MalformedRecord

SCHEMA_VERSION = 1


class SessionState(str, Enum):
    CREATED = "Created"
    PLANNED = "Planned"
    GENERATING = "Generating"
    REVIEWING = "Reviewing"
    INTEGRATING = "Integrating"
    PROTECTING = "Protecting"
    DONE = "Done"
    FAILED = "Failed"

    @property
    def terminal(self) -> bool:
        return self in (SessionState.DONE, SessionState.FAILED)


class EventKind(str, Enum):
    PLAN_PRODUCED = "PlanProduced"
    COMPONENT_GENERATED = "ComponentGenerated"
    REVIEW_SCORED = "ReviewScored"
    REGENERATION_TRIGGERED = "RegenerationTriggered"
    SCENE_INTEGRATED = "SceneIntegrated"
    WATERMARK_EMBEDDED = "WatermarkEmbedded"
    INTERVENTION_APPLIED = "InterventionApplied"
    STATE_CHANGED = "StateChanged"
    ERROR = "Error"


# (state, kind) -> next state. InterventionApplied keeps the state; the
# orchestrator separately enforces which intervention kinds are legal where.
# StateChanged targets are validated against _STATE_CHANGE_TARGETS.
_WORK_TRANSITIONS: dict[tuple[SessionState, EventKind], SessionState] = {
    (SessionState.CREATED, EventKind.PLAN_PRODUCED): SessionState.PLANNED,
    (SessionState.PLANNED, EventKind.COMPONENT_GENERATED): SessionState.GENERATING,
    (SessionState.GENERATING, EventKind.COMPONENT_GENERATED): SessionState.GENERATING,
    (SessionState.GENERATING, EventKind.REVIEW_SCORED): SessionState.REVIEWING,
    (SessionState.REVIEWING, EventKind.REVIEW_SCORED): SessionState.REVIEWING,
    (SessionState.REVIEWING, EventKind.REGENERATION_TRIGGERED): SessionState.GENERATING,
    (SessionState.REVIEWING, EventKind.SCENE_INTEGRATED): SessionState.INTEGRATING,
    (SessionState.INTEGRATING, EventKind.SCENE_INTEGRATED): SessionState.INTEGRATING,
    (SessionState.INTEGRATING, EventKind.WATERMARK_EMBEDDED): SessionState.PROTECTING,
    (SessionState.PROTECTING, EventKind.WATERMARK_EMBEDDED): SessionState.PROTECTING,
}

_STATE_CHANGE_TARGETS: dict[SessionState, set[SessionState]] = {
    SessionState.CREATED: {SessionState.FAILED},
    SessionState.PLANNED: {SessionState.FAILED},
    SessionState.GENERATING: {SessionState.FAILED},
    SessionState.REVIEWING: {SessionState.FAILED},
    SessionState.INTEGRATING: {SessionState.FAILED},
    SessionState.PROTECTING: {SessionState.DONE, SessionState.FAILED},
}

# Payload key contract per event kind: (required, optional).
_PAYLOAD_SCHEMA: dict[EventKind, tuple[frozenset, frozenset]] = {
    EventKind.PLAN_PRODUCED: (frozenset({"plan"}), frozenset({"source"})),
    EventKind.COMPONENT_GENERATED: (
        frozenset({"subtask_id", "seed", "attempt", "digest"}),
        frozenset(),
    ),
    EventKind.REVIEW_SCORED: (
        frozenset({"subtask_id", "attempt", "score", "passed"}),
        frozenset({"details"}),
    ),
    EventKind.REGENERATION_TRIGGERED: (
        frozenset({"subtask_id", "attempt"}),
        frozenset({"reason"}),
    ),
    EventKind.SCENE_INTEGRATED: (frozenset({"stage", "digest"}), frozenset()),
    EventKind.WATERMARK_EMBEDDED: (
        frozenset({"amplitude", "chips_per_bit", "digest_pre", "digest_post"}),
        frozenset({"timestamp", "posthoc"}),
    ),
    EventKind.INTERVENTION_APPLIED: (frozenset({"intervention"}), frozenset()),
    EventKind.STATE_CHANGED: (frozenset({"from", "to"}), frozenset({"reason"})),
    EventKind.ERROR: (frozenset({"code", "message"}), frozenset()),
}


def validate_payload(kind: EventKind, payload: dict) -> None:
    required, optional = _PAYLOAD_SCHEMA[kind]
    keys = set(payload)
    missing = required - keys
    extra = keys - required - optional
    if missing:
        raise MalformedRecord(f"{kind.value} payload missing keys {sorted(missing)}")
    if extra:
        raise MalformedRecord(f"{kind.value} payload has unknown keys {sorted(extra)}")


@dataclass(frozen=True)
class Event:
    seq: int
    timestamp: datetime
    kind: EventKind
    payload: dict

    def __post_init__(self):
        if self.timestamp.tzinfo is None:
            raise ValueError("event timestamps must be timezone-aware")
        validate_payload(self.kind, self.payload)

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "timestamp": self.timestamp.isoformat(),
            "kind": self.kind.value,
            "payload": self.payload,
        }

    @classmethod
    def from_json(cls, obj: dict, position: int | None = None) -> "Event":
        if set(obj) != {"seq", "timestamp", "kind", "payload"}:
            raise MalformedRecord(f"bad event keys {sorted(obj)}", position)
        try:
            kind = EventKind(obj["kind"])
        except ValueError:
            raise MalformedRecord(f"unknown event kind {obj['kind']!r}", position)
        try:
            ts = datetime.fromisoformat(obj["timestamp"])
        except (TypeError, ValueError):
            raise MalformedRecord(f"bad timestamp {obj['timestamp']!r}", position)
        if not isinstance(obj["seq"], int) or not isinstance(obj["payload"], dict):
            raise MalformedRecord("bad seq or payload", position)
        try:
            return cls(seq=obj["seq"], timestamp=ts, kind=kind, payload=obj["payload"])
        except MalformedRecord as exc:
            raise MalformedRecord(str(exc), position) from None


class ReviewPolicy(str, Enum):
    ACCEPT_BEST = "accept_best"
    STRICT = "strict"


@dataclass(frozen=True)
class AblationFlags:
    no_reviewer: bool = False
    no_integration: bool = False
    posthoc_protection: bool = False
    no_hitl: bool = False

    def to_json(self) -> dict:
        return {
            "no_reviewer": self.no_reviewer,
            "no_integration": self.no_integration,
            "posthoc_protection": self.posthoc_protection,
            "no_hitl": self.no_hitl,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AblationFlags":
        allowed = {"no_reviewer", "no_integration", "posthoc_protection", "no_hitl"}
        if set(obj) - allowed:
            raise MalformedRecord(f"unknown ablation flags {sorted(set(obj) - allowed)}")
        return cls(**{k: bool(v) for k, v in obj.items()})


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs for one pipeline run.

    `imperceptibility_budget` caps the RMS pixel perturbation the watermark
    may introduce (0.01 RMS corresponds to 40 dB PSNR). `robustness_weight`
    scales the recoverability penalty inside the protection loss.
    """

    planner_model: str = "grammar-v1"
    generator_model: str = "procedural-v1"
    alignment_threshold: float = 0.25
    max_retries: int = 3
    imperceptibility_budget: float = 0.01
    robustness_weight: float = 1.0
    ablation: AblationFlags = field(default_factory=AblationFlags)
    seed: int = 0
    scene_size: int = 256
    review_policy: ReviewPolicy = ReviewPolicy.ACCEPT_BEST
    quick_suite: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alignment_threshold <= 1.0:
            raise ValueError("alignment_threshold must be in [0,1]")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if not 0.0 <= self.imperceptibility_budget <= 0.05:
            raise ValueError("imperceptibility_budget must be in [0, 0.05]")
        if self.robustness_weight < 0.0:
            raise ValueError("robustness_weight must be >= 0")
        if self.scene_size < 16:
            raise ValueError("scene_size must be >= 16")

    def to_json(self) -> dict:
        return {
            "planner_model": self.planner_model,
            "generator_model": self.generator_model,
            "alignment_threshold": self.alignment_threshold,
            "max_retries": self.max_retries,
            "imperceptibility_budget": self.imperceptibility_budget,
            "robustness_weight": self.robustness_weight,
            "ablation": self.ablation.to_json(),
            "seed": self.seed,
            "scene_size": self.scene_size,
            "review_policy": self.review_policy.value,
            "quick_suite": self.quick_suite,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        allowed = {
            "planner_model", "generator_model", "alignment_threshold",
            "max_retries", "imperceptibility_budget", "robustness_weight",
            "ablation", "seed", "scene_size", "review_policy", "quick_suite",
        }
        if set(obj) - allowed:
            raise MalformedRecord(f"unknown config keys {sorted(set(obj) - allowed)}")
        kwargs = dict(obj)
        if "ablation" in kwargs:
            kwargs["ablation"] = AblationFlags.from_json(kwargs["ablation"])
        if "review_policy" in kwargs:
            kwargs["review_policy"] = ReviewPolicy(kwargs["review_policy"])
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise MalformedRecord(f"bad config: {exc}") from None


@dataclass(frozen=True)
class MetricsReport:
    """Per-session loss diagnostics; joint_loss is the exact sum of the four."""

    plan_loss: float
    review_loss: float
    coherence_loss: float
    protection_loss: float

    @property
    def joint_loss(self) -> float:
        return self.plan_loss + self.review_loss + self.coherence_loss + self.protection_loss

    def to_json(self) -> dict:
        return {
            "plan_loss": self.plan_loss,
            "review_loss": self.review_loss,
            "coherence_loss": self.coherence_loss,
            "protection_loss": self.protection_loss,
            "joint_loss": self.joint_loss,
        }


@dataclass
class SessionRecord:
    """Append-only event log plus the derived state cache."""

    session_id: str
    config: PipelineConfig
    events: list[Event] = field(default_factory=list)
    state: SessionState = SessionState.CREATED
    metrics: MetricsReport | None = None

    @classmethod
    def create(cls, config: PipelineConfig, session_id: str | None = None) -> "SessionRecord":
        return cls(session_id=session_id or uuid.uuid4().hex, config=config)

    @property
    def next_seq(self) -> int:
        return self.events[-1].seq + 1 if self.events else 1


def next_state(state: SessionState, event: Event) -> SessionState:
    """Transition function; raises IllegalTransition for illegal (state, kind)."""
    if state.terminal:
        raise IllegalTransition(state.value, event.kind.value)
    if event.kind is EventKind.INTERVENTION_APPLIED:
        return state
    if event.kind is EventKind.ERROR:
        return SessionState.FAILED
    if event.kind is EventKind.STATE_CHANGED:
        source = event.payload["from"]
        target = event.payload["to"]
        if source != state.value:
            raise IllegalTransition(state.value, f"StateChanged(from={source})")
        try:
            target_state = SessionState(target)
        except ValueError:
            raise IllegalTransition(state.value, f"StateChanged(to={target})")
        if target_state not in _STATE_CHANGE_TARGETS.get(state, set()):
            raise IllegalTransition(state.value, f"StateChanged(to={target})")
        return target_state
    key = (state, event.kind)
    if key not in _WORK_TRANSITIONS:
        raise IllegalTransition(state.value, event.kind.value)
    return _WORK_TRANSITIONS[key]


def transition(session: SessionRecord, event: Event) -> SessionRecord:
    """Append `event` and advance the cached state. Mutates and returns `session`."""
    if session.events and event.seq <= session.events[-1].seq:
        raise IllegalTransition(session.state.value, f"non-increasing seq {event.seq}")
    new_state = next_state(session.state, event)
    session.events.append(event)
    session.state = new_state
    return session


def replay(
    config: PipelineConfig, events: list[Event], session_id: str = "replay"
) -> SessionRecord:
    """Fold an event list from Created; deterministic by construction."""
    session = SessionRecord(session_id=session_id, config=config)
    for event in events:
        transition(session, event)
    return session


def serialize_session(session: SessionRecord) -> bytes:
    """One JSON object per line: config header first, then the event stream."""
    header = {
        "schema": SCHEMA_VERSION,
        "session_id": session.session_id,
        "config": session.config.to_json(),
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(json.dumps(e.to_json(), sort_keys=True) for e in session.events)
    return ("\n".join(lines) + "\n").encode("utf-8")


def deserialize_session(data: bytes) -> SessionRecord:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedRecord(f"not utf-8: {exc}", 0)
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise MalformedRecord("empty session stream", 0)
    objs = []
    for i, line in enumerate(lines):
        try:
            objs.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise MalformedRecord(f"bad JSON on line {i + 1}: {exc.msg}", i + 1)
    header = objs[0]
    if not isinstance(header, dict) or set(header) != {"schema", "session_id", "config"}:
        raise MalformedRecord("bad config header", 1)
    if header["schema"] != SCHEMA_VERSION:
        raise MalformedRecord(f"unsupported schema {header['schema']!r}", 1)
    config = PipelineConfig.from_json(header["config"])
    events = [Event.from_json(obj, position=i + 2) for i, obj in enumerate(objs[1:])]
    session = replay(config, events, session_id=header["session_id"])
    expected_seq = 0
    for event in session.events:
        if event.seq <= expected_seq:
            raise MalformedRecord(f"seq not strictly increasing at {event.seq}")
        expected_seq = event.seq
    return session


def utc_now() -> datetime:
    return datetime.now(timezone.utc)
