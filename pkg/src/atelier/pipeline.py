"""End-to-end pipeline driver with human-in-the-loop sessions.

The event log is authoritative: every stage appends typed events, and a
runner can be reconstructed from the log alone because generation is
deterministic given the recorded seeds. `advance` executes exactly one
stage; interventions land between stages and mutate the pending stage's
inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from . import attacks, bench, generator, integrator, planner, protector, reviewer
from .errors import (
    IllegalIntervention,
    MalformedRecord,
    NotReady,
    UnknownSession,
)
from .image import Image, content_hash, content_hash_hex, read_ppm, write_ppm
from .planner import PlanEdit, PromptText, SubtaskPlan
from .session import (
    Event,
    EventKind,
    MetricsReport,
    PipelineConfig,
    SessionRecord,
    SessionState,
    transition,
)

Clock = Callable[[int], datetime]


def wall_clock(seq: int) -> datetime:
    return datetime.now(timezone.utc)


@dataclass(frozen=True)
class FixedClock:
    """Deterministic clock: timestamp depends only on the event seq, so a
    resumed session stamps the same times as an uninterrupted one."""

    start: datetime = datetime(2026, 1, 1, tzinfo=timezone.utc)
    step: timedelta = timedelta(seconds=1)

    def __call__(self, seq: int) -> datetime:
        return self.start + seq * self.step


_INTERVENTION_KINDS = {
    "edit_plan", "override_review", "adjust_layout", "set_protection_params", "abort",
}
# States in which each intervention kind may land.
_INTERVENTION_STATES = {
    "edit_plan": {SessionState.PLANNED, SessionState.REVIEWING},
    "override_review": {SessionState.REVIEWING},
    "adjust_layout": {
        SessionState.PLANNED, SessionState.GENERATING, SessionState.REVIEWING,
    },
    "set_protection_params": {
        SessionState.CREATED, SessionState.PLANNED, SessionState.GENERATING,
        SessionState.REVIEWING, SessionState.INTEGRATING,
    },
    "abort": {
        SessionState.CREATED, SessionState.PLANNED, SessionState.GENERATING,
        SessionState.REVIEWING, SessionState.INTEGRATING, SessionState.PROTECTING,
    },
}


@dataclass(frozen=True)
class Intervention:
    kind: str
    actor: str = "anonymous"
    edit: PlanEdit | None = None
    subtask_id: int | None = None
    accept: bool | None = None
    dx: int = 0
    dy: int = 0
    amplitude: float | None = None
    chips_per_bit: int | None = None

    def __post_init__(self):
        if self.kind not in _INTERVENTION_KINDS:
            raise ValueError(f"unknown intervention kind {self.kind!r}")
        if self.kind == "edit_plan" and self.edit is None:
            raise ValueError("edit_plan requires an edit")
        if self.kind == "override_review" and (
            self.subtask_id is None or self.accept is None
        ):
            raise ValueError("override_review requires subtask_id and accept")
        if self.kind == "adjust_layout" and self.subtask_id is None:
            raise ValueError("adjust_layout requires subtask_id")

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind, "actor": protector.hash_user_id(self.actor)}
        if self.edit is not None:
            out["edit"] = self.edit.to_json()
        if self.subtask_id is not None:
            out["subtask_id"] = self.subtask_id
        if self.accept is not None:
            out["accept"] = self.accept
        if self.kind == "adjust_layout":
            out["dx"] = self.dx
            out["dy"] = self.dy
        if self.amplitude is not None:
            out["amplitude"] = self.amplitude
        if self.chips_per_bit is not None:
            out["chips_per_bit"] = self.chips_per_bit
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Intervention":
        allowed = {
            "kind", "actor", "edit", "subtask_id", "accept",
            "dx", "dy", "amplitude", "chips_per_bit",
        }
        if not isinstance(obj, dict) or set(obj) - allowed:
            raise MalformedRecord("bad intervention document")
        try:
            return cls(
                kind=obj.get("kind", ""),
                actor=obj.get("actor", "anonymous"),
                edit=PlanEdit.from_json(obj["edit"]) if "edit" in obj else None,
                subtask_id=obj.get("subtask_id"),
                accept=obj.get("accept"),
                dx=obj.get("dx", 0),
                dy=obj.get("dy", 0),
                amplitude=obj.get("amplitude"),
                chips_per_bit=obj.get("chips_per_bit"),
            )
        except ValueError as exc:
            raise MalformedRecord(str(exc)) from None


@dataclass
class Artifact:
    image: Image
    provenance: protector.ProvenanceRecord
    metrics: MetricsReport
    session_id: str


@dataclass
class _WorkingState:
    """Everything derivable by folding the event log."""

    plan: SubtaskPlan | None = None
    seeds: dict[int, dict[int, int]] = field(default_factory=dict)  # id -> attempt -> seed
    scores: dict[int, dict[int, tuple[float, bool]]] = field(default_factory=dict)
    overridden: set[int] = field(default_factory=set)
    dirty: set[int] = field(default_factory=set)
    layout_deltas: dict[int, tuple[int, int]] = field(default_factory=dict)
    amplitude: float | None = None
    chips_per_bit: int | None = None
    embed_info: dict | None = None
    stage_digests: dict[str, str] = field(default_factory=dict)

    def best_attempt(self, subtask_id: int) -> int:
        attempts = self.seeds.get(subtask_id, {})
        if not attempts:
            raise KeyError(f"no attempts for subtask {subtask_id}")
        scored = self.scores.get(subtask_id, {})
        best, best_score = None, -1.0
        for attempt in sorted(attempts):
            value = scored.get(attempt, (0.0, False))[0]
            if value > best_score:
                best, best_score = attempt, value
        return best if best is not None else min(attempts)

    def final_score(self, subtask_id: int) -> float:
        scored = self.scores.get(subtask_id, {})
        if not scored:
            return 0.0
        return max(v for v, _ in scored.values())


class SessionRunner:
    """Single-writer executor for one session."""

    def __init__(
        self,
        prompt: PromptText,
        config: PipelineConfig,
        session_id: str | None = None,
        clock: Clock = wall_clock,
        salt: str | None = None,
        user_id: str = "anonymous",
        data_dir: Path | None = None,
        planner_client=None,
        generator_client=None,
        scorer_client=None,
    ):
        self.prompt = prompt
        self.session = SessionRecord.create(config, session_id=session_id)
        self.clock = clock
        self.salt = salt if salt is not None else protector.watermark_salt()
        self.user_id = user_id
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.planner_client = planner_client
        self.generator_client = generator_client
        self.scorer_client = scorer_client
        self.state = _WorkingState()
        self._components: dict[tuple[int, int], generator.Component] = {}
        self._scene: integrator.Scene | None = None
        self._artifact: Artifact | None = None
        self.gen_params = generator.GeneratorParams(
            resolution=max(32, config.scene_size // 2)
        )
        if self.data_dir is not None:
            self.data_dir.mkdir(parents=True, exist_ok=True)
            self._write_log_header()

    # -- event plumbing ----------------------------------------------------

    @property
    def config(self) -> PipelineConfig:
        return self.session.config

    def _emit(self, kind: EventKind, payload: dict) -> Event:
        event = Event(
            seq=self.session.next_seq,
            timestamp=self.clock(self.session.next_seq),
            kind=kind,
            payload=payload,
        )
        transition(self.session, event)
        self._fold(event)
        self._append_log(event)
        return event

    def _fold(self, event: Event) -> None:
        payload = event.payload
        kind = event.kind
        state = self.state
        if kind is EventKind.PLAN_PRODUCED:
            state.plan = SubtaskPlan.from_json(payload["plan"])
        elif kind is EventKind.COMPONENT_GENERATED:
            sid = payload["subtask_id"]
            state.seeds.setdefault(sid, {})[payload["attempt"]] = payload["seed"]
            state.dirty.discard(sid)
        elif kind is EventKind.REVIEW_SCORED:
            sid = payload["subtask_id"]
            state.scores.setdefault(sid, {})[payload["attempt"]] = (
                payload["score"],
                payload["passed"],
            )
        elif kind is EventKind.SCENE_INTEGRATED:
            state.stage_digests[payload["stage"]] = payload["digest"]
        elif kind is EventKind.WATERMARK_EMBEDDED:
            state.embed_info = dict(payload)
        elif kind is EventKind.INTERVENTION_APPLIED:
            self._fold_intervention(payload["intervention"])

    def _fold_intervention(self, obj: dict) -> None:
        state = self.state
        kind = obj["kind"]
        if kind == "edit_plan":
            if state.plan is None:
                raise IllegalIntervention("no plan to edit")
            old = {s.id: s for s in state.plan.subtasks}
            new_plan = planner.apply_plan_edit(state.plan, PlanEdit.from_json(obj["edit"]))
            new = {s.id: s for s in new_plan.subtasks}
            for sid, subtask in new.items():
                if sid not in old:
                    state.dirty.add(sid)
                elif subtask != old[sid] and sid in state.seeds:
                    if subtask.attributes != old[sid].attributes or subtask.entity != old[sid].entity:
                        state.dirty.add(sid)
            for sid in old:
                if sid not in new:
                    state.seeds.pop(sid, None)
                    state.scores.pop(sid, None)
                    state.dirty.discard(sid)
                    state.overridden.discard(sid)
                    state.layout_deltas.pop(sid, None)
            state.plan = new_plan
        elif kind == "override_review":
            sid = obj["subtask_id"]
            if obj["accept"]:
                state.overridden.add(sid)
                state.dirty.discard(sid)
            else:
                state.overridden.discard(sid)
                state.dirty.add(sid)
        elif kind == "adjust_layout":
            sid = obj["subtask_id"]
            dx0, dy0 = state.layout_deltas.get(sid, (0, 0))
            state.layout_deltas[sid] = (dx0 + obj.get("dx", 0), dy0 + obj.get("dy", 0))
        elif kind == "set_protection_params":
            if "amplitude" in obj:
                state.amplitude = obj["amplitude"]
            if "chips_per_bit" in obj:
                state.chips_per_bit = obj["chips_per_bit"]

    # -- component bookkeeping ---------------------------------------------

    def _component(self, subtask_id: int, attempt: int) -> generator.Component:
        key = (subtask_id, attempt)
        if key not in self._components:
            seed = self.state.seeds[subtask_id][attempt]
            subtask = self.state.plan.subtask(subtask_id)
            comp = self._generate(subtask, seed)
            comp.attempt = attempt
            self._components[key] = comp
        return self._components[key]

    def _generate(self, subtask, seed) -> generator.Component:
        if self.generator_client is not None:
            return self.generator_client.generate(subtask, seed, self.gen_params)
        return generator.generate(subtask, seed, self.gen_params)

    def _best_components(self) -> list[generator.Component]:
        out = []
        for subtask in self.state.plan.subtasks:
            attempt = self.state.best_attempt(subtask.id)
            comp = self._component(subtask.id, attempt)
            comp.score = self.state.final_score(subtask.id)
            out.append(comp)
        return out

    def _scorer(self):
        if self.scorer_client is not None:
            return self.scorer_client.score
        return reviewer.score

    # -- stages --------------------------------------------------------------

    def advance(self) -> SessionState:
        """Execute exactly one pipeline stage."""
        state = self.session.state
        if state is SessionState.CREATED:
            self._stage_plan()
        elif state is SessionState.PLANNED:
            self._stage_generate()
        elif state is SessionState.GENERATING:
            self._stage_review()
        elif state is SessionState.REVIEWING:
            self._stage_integrate()
        elif state is SessionState.INTEGRATING:
            self._stage_protect()
        elif state is SessionState.PROTECTING:
            self._stage_finalize()
        else:
            raise NotReady(f"session is {state.value}; nothing to advance")
        return self.session.state

    def run(self) -> Artifact:
        """Drive all stages to Done and return the protected artifact."""
        while not self.session.state.terminal:
            self.advance()
        return self.artifact()

    def _stage_plan(self) -> None:
        if self.planner_client is not None:
            plan = self.planner_client.plan(self.prompt)
        else:
            plan = planner.make_plan(self.prompt, self.config)
        self._emit(
            EventKind.PLAN_PRODUCED,
            {"plan": plan.to_json(), "source": plan.source},
        )

    def _emit_component(self, comp: generator.Component) -> None:
        self._components[(comp.subtask_id, comp.attempt)] = comp
        self._emit(
            EventKind.COMPONENT_GENERATED,
            {
                "subtask_id": comp.subtask_id,
                "seed": comp.seed_used,
                "attempt": comp.attempt,
                "digest": content_hash_hex(comp.image),
            },
        )

    def _stage_generate(self) -> None:
        for subtask in self.state.plan.subtasks:
            comp = self._generate(subtask, self.config.seed)
            comp.attempt = 0
            self._emit_component(comp)

    def _stage_review(self) -> None:
        plan = self.state.plan
        subtasks = {s.id: s for s in plan.subtasks}
        components = [
            self._component(s.id, self.state.best_attempt(s.id)) for s in plan.subtasks
        ]

        def regen(comp, subtask):
            fresh = generator.regenerate(
                comp, subtask, self.gen_params, self.config.max_retries
            )
            self._emit_component(fresh)
            return fresh

        def notify(kind: str, payload: dict):
            self._emit(EventKind(kind), payload)

        reviewer.review_gate(
            components,
            subtasks,
            self.prompt,
            tau=self.config.alignment_threshold,
            max_retries=self.config.max_retries,
            regen=regen,
            policy=self.config.review_policy,
            skip_gate=self.config.ablation.no_reviewer,
            scorer=self._scorer(),
            notify=notify,
        )

    def _reconcile_components(self) -> None:
        """Regenerate components invalidated by interventions and generate
        components for subtasks added after the generate stage."""
        plan = self.state.plan
        pending = sorted(
            sid
            for sid in (
                self.state.dirty | {s.id for s in plan.subtasks if s.id not in self.state.seeds}
            )
        )
        scorer = self._scorer()
        for sid in pending:
            subtask = plan.subtask(sid)
            attempts = self.state.seeds.get(sid, {})
            if attempts:
                last_attempt = max(attempts)
                next_attempt = last_attempt + 1
                next_seed = attempts[last_attempt] + 1
            else:
                next_attempt = 0
                next_seed = self.config.seed
            self._emit(
                EventKind.REGENERATION_TRIGGERED,
                {"subtask_id": sid, "attempt": next_attempt, "reason": "intervention"},
            )
            comp = self._generate(subtask, next_seed)
            comp.attempt = next_attempt
            self._emit_component(comp)
            result = scorer(comp, self.prompt, subtask)
            self._emit(
                EventKind.REVIEW_SCORED,
                {
                    "subtask_id": sid,
                    "attempt": next_attempt,
                    "score": result.value,
                    "passed": result.value >= self.config.alignment_threshold
                    or sid in self.state.overridden,
                    "details": dict(result.details),
                },
            )

    def _build_layout(self) -> integrator.Layout:
        layout = integrator.resolve_layout(self.state.plan, self.config.scene_size)
        if not self.state.layout_deltas:
            return layout
        size = self.config.scene_size
        placements = dict(layout.placements)
        for sid, (dx, dy) in self.state.layout_deltas.items():
            if sid not in placements:
                continue
            x0, y0, w, h = placements[sid].box
            x0 = max(0, min(x0 + dx, size - w))
            y0 = max(0, min(y0 + dy, size - h))
            placements[sid] = replace(placements[sid], box=(x0, y0, w, h))
        fg_ids = [
            s.id for s in self.state.plan.foregrounds if s.id in placements
        ]
        adjacency: set[tuple[int, int]] = set()
        d = integrator.ADJACENCY_DILATION
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
        return integrator.Layout(
            placements=placements, adjacency=adjacency, scene_size=size
        )

    def _build_scene(self, emit: bool) -> integrator.Scene:
        layout = self._build_layout()
        components = self._best_components()
        scene = integrator.composite(components, layout, self.config.scene_size)
        if emit:
            self._emit(
                EventKind.SCENE_INTEGRATED,
                {"stage": "composited", "digest": content_hash_hex(scene.to_image())},
            )
        if not self.config.ablation.no_integration:
            scene = integrator.harmonize(scene)
            if emit:
                self._emit(
                    EventKind.SCENE_INTEGRATED,
                    {"stage": "harmonized", "digest": content_hash_hex(scene.to_image())},
                )
            scene = integrator.blend_seams(scene)
            if emit:
                self._emit(
                    EventKind.SCENE_INTEGRATED,
                    {"stage": "blended", "digest": content_hash_hex(scene.to_image())},
                )
        return scene

    def _stage_integrate(self) -> None:
        self._reconcile_components()
        self._scene = self._build_scene(emit=True)

    def _protection_key(
        self, digest: bytes, timestamp: datetime
    ) -> protector.WatermarkKey:
        size = self.config.scene_size
        amplitude = (
            self.state.amplitude
            if self.state.amplitude is not None
            else protector.DEFAULT_AMPLITUDE
        )
        key = protector.derive_key(
            digest,
            timestamp,
            self.salt,
            size,
            size,
            chips_per_bit=self.state.chips_per_bit,
            amplitude=amplitude,
        )
        budget = self.config.imperceptibility_budget
        if key.predicted_rms() > budget:
            raise IllegalIntervention(
                f"protection params exceed the imperceptibility budget: "
                f"rms {key.predicted_rms():.5f} > {budget}"
            )
        return key

    def _quick_suite_penalty(self, protected: Image, key) -> float:
        if not self.config.quick_suite:
            return 0.0
        grid = [
            attacks.AttackSpec(kind="jpeg", quality=70),
            attacks.AttackSpec(kind="gaussian_noise", sigma=0.03, seed=self.config.seed),
            attacks.AttackSpec(kind="crop", fraction=0.25),
        ]
        accuracies = []
        for spec in grid:
            attacked, offset = spec.apply(protected)
            window = protector.CropWindow(*offset) if offset is not None else None
            result = protector.extract(attacked, key, window=window)
            accuracies.append(result.bit_accuracy)
        return 1.0 - float(np.mean(accuracies))

    def _stage_protect(self) -> None:
        if self._scene is None:
            self._scene = self._build_scene(emit=False)
        scene_image = self._scene.to_image()
        posthoc = self.config.ablation.posthoc_protection
        carrier = (
            attacks.jpeg_roundtrip(scene_image, bench.POSTHOC_EXPORT_QUALITY)
            if posthoc
            else scene_image
        )
        timestamp = self.clock(self.session.next_seq)
        digest_pre = content_hash(carrier)
        key = self._protection_key(digest_pre, timestamp)
        protected = protector.embed(carrier, key)
        digest_post = content_hash(protected)
        self._emit(
            EventKind.WATERMARK_EMBEDDED,
            {
                "amplitude": key.amplitude,
                "chips_per_bit": key.chips_per_bit,
                "digest_pre": digest_pre.hex(),
                "digest_post": digest_post.hex(),
                "timestamp": timestamp.isoformat(),
                "posthoc": posthoc,
            },
        )
        self._set_outputs(carrier, protected, key, timestamp, digest_pre, digest_post)
        self._emit(
            EventKind.STATE_CHANGED,
            {"from": SessionState.PROTECTING.value, "to": SessionState.DONE.value},
        )
        self._persist_artifact()

    def _stage_finalize(self) -> None:
        """Resume path: the embed event exists but Done was never reached."""
        self._recompute_outputs()
        self._emit(
            EventKind.STATE_CHANGED,
            {"from": SessionState.PROTECTING.value, "to": SessionState.DONE.value},
        )
        self._persist_artifact()

    def _recompute_outputs(self) -> None:
        """Rebuild the artifact deterministically from the recorded embed event."""
        info = self.state.embed_info
        if info is None:
            raise NotReady("no embedding recorded")
        if self._scene is None:
            self._scene = self._build_scene(emit=False)
        scene_image = self._scene.to_image()
        carrier = (
            attacks.jpeg_roundtrip(scene_image, bench.POSTHOC_EXPORT_QUALITY)
            if info.get("posthoc")
            else scene_image
        )
        timestamp = datetime.fromisoformat(info["timestamp"])
        digest_pre = content_hash(carrier)
        if digest_pre.hex() != info["digest_pre"]:
            raise MalformedRecord("replayed scene does not match the recorded digest")
        key = protector.derive_key(
            digest_pre,
            timestamp,
            self.salt,
            self.config.scene_size,
            self.config.scene_size,
            chips_per_bit=info["chips_per_bit"],
            amplitude=info["amplitude"],
        )
        protected = protector.embed(carrier, key)
        self._set_outputs(
            carrier, protected, key, timestamp, digest_pre, content_hash(protected)
        )

    def _set_outputs(self, carrier, protected, key, timestamp, digest_pre, digest_post):
        provenance = protector.write_provenance(
            self.session.session_id,
            self.config,
            key,
            digest_pre,
            digest_post,
            timestamp,
            user_id=self.user_id,
        )
        metrics = self._compute_metrics(carrier, protected, key)
        self.session.metrics = metrics
        self._artifact = Artifact(
            image=protected,
            provenance=provenance,
            metrics=metrics,
            session_id=self.session.session_id,
        )

    def _compute_metrics(self, carrier, protected, key) -> MetricsReport:
        plan = self.state.plan
        plan_loss = planner.plan_loss(plan)
        finals = [self.state.final_score(s.id) for s in plan.subtasks]
        review_loss = reviewer.review_loss(finals, self.config.alignment_threshold)
        scene = self._scene
        features = integrator.scene_features(scene)
        coherence = integrator.coherence_loss(features, scene.layout.adjacency)
        penalty = self._quick_suite_penalty(protected, key)
        prot = protector.protection_loss(
            carrier, protected, penalty, self.config.robustness_weight
        )
        return MetricsReport(
            plan_loss=plan_loss,
            review_loss=review_loss,
            coherence_loss=coherence,
            protection_loss=prot,
        )

    # -- interventions -------------------------------------------------------

    def submit_intervention(self, intervention: Intervention) -> Event:
        state = self.session.state
        if state.terminal:
            raise IllegalIntervention(f"session is {state.value}")
        if state not in _INTERVENTION_STATES[intervention.kind]:
            raise IllegalIntervention(
                f"{intervention.kind} is not legal in state {state.value}"
            )
        if intervention.kind == "set_protection_params":
            self._validate_protection_params(intervention)
        if intervention.kind in ("override_review", "adjust_layout"):
            if self.state.plan is None:
                raise IllegalIntervention("no plan yet")
            self.state.plan.subtask(intervention.subtask_id)  # raises UnknownSubtask
        event = self._emit(
            EventKind.INTERVENTION_APPLIED, {"intervention": intervention.to_json()}
        )
        if intervention.kind == "abort":
            self._emit(
                EventKind.STATE_CHANGED,
                {
                    "from": self.session.state.value,
                    "to": SessionState.FAILED.value,
                    "reason": "aborted",
                },
            )
        return event

    def _validate_protection_params(self, intervention: Intervention) -> None:
        size = self.config.scene_size
        amplitude = (
            intervention.amplitude
            if intervention.amplitude is not None
            else (self.state.amplitude or protector.DEFAULT_AMPLITUDE)
        )
        chips = (
            intervention.chips_per_bit
            if intervention.chips_per_bit is not None
            else self.state.chips_per_bit
        )
        slots = protector.slot_capacity(size, size)
        if chips is None:
            chips = slots // protector.PAYLOAD_BITS
        if chips < 1 or chips * protector.PAYLOAD_BITS > slots:
            raise IllegalIntervention(
                f"chips_per_bit {chips} does not fit {slots} slots"
            )
        if amplitude <= 0:
            raise IllegalIntervention("amplitude must be > 0")
        n_chips = chips * protector.PAYLOAD_BITS
        rms = amplitude * float(np.sqrt(n_chips / (size * size)))
        if rms > self.config.imperceptibility_budget:
            raise IllegalIntervention(
                f"params exceed the imperceptibility budget: rms {rms:.5f} > "
                f"{self.config.imperceptibility_budget}"
            )

    # -- outputs ---------------------------------------------------------------

    def artifact(self) -> Artifact:
        if self.session.state is not SessionState.DONE or self._artifact is None:
            raise NotReady(f"session is {self.session.state.value}")
        return self._artifact

    def metrics_report(self) -> MetricsReport:
        if self.session.state is not SessionState.DONE or self.session.metrics is None:
            raise NotReady(f"session is {self.session.state.value}")
        return self.session.metrics

    # -- persistence -------------------------------------------------------------

    def _log_path(self) -> Path:
        return self.data_dir / self.session.session_id / "session.jsonl"

    def _write_log_header(self) -> None:
        path = self._log_path()
        path.parent.mkdir(parents=True, exist_ok=True)
        if not path.exists():
            header = {
                "schema": 1,
                "session_id": self.session.session_id,
                "config": self.config.to_json(),
                "prompt": self.prompt.text,
            }
            path.write_text(json.dumps(header, sort_keys=True) + "\n", encoding="utf-8")

    def _append_log(self, event: Event) -> None:
        if self.data_dir is None:
            return
        with self._log_path().open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(event.to_json(), sort_keys=True) + "\n")

    def _persist_artifact(self) -> None:
        if self.data_dir is None or self._artifact is None:
            return
        out = self.data_dir / self.session.session_id
        out.mkdir(parents=True, exist_ok=True)
        (out / "artifact.ppm").write_bytes(write_ppm(self._artifact.image))
        (out / "provenance.json").write_bytes(
            self._artifact.provenance.to_canonical_json()
        )
        (out / "metrics.json").write_text(
            json.dumps(self._artifact.metrics.to_json(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    def _restore_outputs(self) -> None:
        """Load (or deterministically rebuild) the artifact of a Done session."""
        out = self.data_dir / self.session.session_id if self.data_dir else None
        try:
            image = read_ppm((out / "artifact.ppm").read_bytes())
            provenance = protector.ProvenanceRecord.parse(
                (out / "provenance.json").read_bytes()
            )
            mobj = json.loads((out / "metrics.json").read_text(encoding="utf-8"))
            metrics = MetricsReport(
                plan_loss=mobj["plan_loss"],
                review_loss=mobj["review_loss"],
                coherence_loss=mobj["coherence_loss"],
                protection_loss=mobj["protection_loss"],
            )
        except (OSError, TypeError, KeyError, MalformedRecord):
            self._recompute_outputs()
            self._persist_artifact()
            return
        self.session.metrics = metrics
        self._artifact = Artifact(
            image=image,
            provenance=provenance,
            metrics=metrics,
            session_id=self.session.session_id,
        )


def load_runner(
    data_dir: Path,
    session_id: str,
    clock: Clock = wall_clock,
    salt: str | None = None,
    user_id: str = "anonymous",
) -> SessionRunner:
    """Rebuild a runner by replaying its event log from disk."""
    path = Path(data_dir) / session_id / "session.jsonl"
    if not path.exists():
        raise UnknownSession(session_id)
    lines = [ln for ln in path.read_text(encoding="utf-8").split("\n") if ln.strip()]
    header = json.loads(lines[0])
    required = {"schema", "session_id", "config", "prompt"}
    if set(header) != required:
        raise MalformedRecord("bad session log header", 1)
    config = PipelineConfig.from_json(header["config"])
    runner = SessionRunner(
        prompt=PromptText(header["prompt"]),
        config=config,
        session_id=header["session_id"],
        clock=clock,
        salt=salt,
        user_id=user_id,
        data_dir=None,
    )
    for i, line in enumerate(lines[1:]):
        event = Event.from_json(json.loads(line), position=i + 2)
        transition(runner.session, event)
        runner._fold(event)
    runner.data_dir = Path(data_dir)
    if runner.session.state is SessionState.DONE:
        runner._restore_outputs()
    return runner


def run_pipeline(
    prompt: PromptText,
    config: PipelineConfig,
    clock: Clock = wall_clock,
    salt: str | None = None,
    user_id: str = "anonymous",
    data_dir: Path | None = None,
) -> Artifact:
    """Plan, generate, review, integrate, and protect in one call."""
    runner = SessionRunner(
        prompt, config, clock=clock, salt=salt, user_id=user_id, data_dir=data_dir
    )
    return runner.run()


class SessionStore:
    """Keeps live runners and lazily revives persisted ones from disk."""

    def __init__(
        self,
        data_dir: Path | None = None,
        clock: Clock = wall_clock,
        salt: str | None = None,
    ):
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.clock = clock
        self.salt = salt
        self._runners: dict[str, SessionRunner] = {}

    def create(
        self, prompt: PromptText, config: PipelineConfig, user_id: str = "anonymous"
    ) -> SessionRunner:
        runner = SessionRunner(
            prompt,
            config,
            clock=self.clock,
            salt=self.salt,
            user_id=user_id,
            data_dir=self.data_dir,
        )
        self._runners[runner.session.session_id] = runner
        return runner

    def get(self, session_id: str) -> SessionRunner:
        if session_id in self._runners:
            return self._runners[session_id]
        if self.data_dir is not None:
            runner = load_runner(
                self.data_dir, session_id, clock=self.clock, salt=self.salt
            )
            self._runners[session_id] = runner
            return runner
        raise UnknownSession(session_id)

    def advance(self, session_id: str) -> SessionState:
        runner = self.get(session_id)
        state = runner.advance()
        if not self.get(session_id).config.ablation.no_hitl:
            return state
        while not runner.session.state.terminal:
            state = runner.advance()
        return state

    def ids(self) -> list[str]:
        known = set(self._runners)
        if self.data_dir is not None and self.data_dir.exists():
            for child in self.data_dir.iterdir():
                if (child / "session.jsonl").exists():
                    known.add(child.name)
        return sorted(known)
