"""Prompt decomposition: controlled grammar -> subtask plan.

The grammar covers entity clauses (article? adjectives noun pose?) joined
by "and" or spatial relations, plus an optional background phrase
("at sunset" / "at night" / "at noon"). Tokens the grammar cannot attach
are collected as unparsed; plan quality is scored from the consumed
fraction of tokens.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace

from . import lexicon
from .errors import CyclicLayout, MalformedRecord, NoEntityFound, UnknownSubtask
from .session import PipelineConfig

PLAN_SCHEMA_VERSION = 1

_ARTICLES = {"a", "an", "the"}
_STOPWORDS = {
    "create", "generate", "make", "draw", "render", "image", "picture",
    "scene", "of", "with", "in", "on", "is", "are", "to", "and", "during",
    "dramatic", "at",
}
_RELATION_WORDS = {"above": "above", "below": "below", "over": "over"}


@dataclass(frozen=True)
class PromptText:
    text: str

    @property
    def normalized(self) -> str:
        collapsed = re.sub(r"\s+", " ", self.text.strip().lower())
        return collapsed

    def __post_init__(self):
        if not self.normalized:
            raise ValueError("prompt is empty after normalization")


@dataclass
class Clause:
    entity: str
    colors: list[str] = field(default_factory=list)
    sizes: list[str] = field(default_factory=list)
    poses: list[str] = field(default_factory=list)
    styles: list[str] = field(default_factory=list)


@dataclass
class PromptAST:
    clauses: list[Clause]
    relations: list[tuple[int, str, int]]  # (from clause, relation, to clause)
    background: str | None
    unparsed: list[str]
    total_tokens: int

    @property
    def consumed_tokens(self) -> int:
        return self.total_tokens - len(self.unparsed)


def _tokenize(normalized: str) -> list[str]:
    return [t for t in re.split(r"[^a-z0-9-]+", normalized) if t]


def parse_prompt(prompt: PromptText) -> PromptAST:
    """Single left-to-right pass; raises NoEntityFound for entity-free prompts."""
    tokens = _tokenize(prompt.normalized)
    clauses: list[Clause] = []
    relations: list[tuple[int, str, int]] = []
    background: str | None = None
    unparsed: list[str] = []
    pending: list[str] = []  # adjectives awaiting their noun
    pending_relation: str | None = None
    relation_source: int | None = None
    clause_open = False  # a pose right after a noun attaches to that clause

    def flush_pending():
        unparsed.extend(pending)
        pending.clear()

    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok in lexicon.BACKGROUND_WORDS:
            background = lexicon.BACKGROUND_WORDS[tok]
            flush_pending()
            clause_open = False
        elif tok in lexicon.ENTITIES:
            clause = Clause(entity=tok)
            for adj in pending:
                if adj in lexicon.COLOR_RANGES:
                    clause.colors.append(adj)
                elif adj in lexicon.SIZES:
                    clause.sizes.append(adj)
                elif adj in lexicon.POSES:
                    clause.poses.append(adj)
                else:
                    clause.styles.append(adj)
            pending.clear()
            clauses.append(clause)
            clause_open = True
            if pending_relation is not None and relation_source is not None:
                relations.append((relation_source, pending_relation, len(clauses) - 1))
                pending_relation = None
                relation_source = None
        elif tok in _RELATION_WORDS or (
            tok in ("left", "right", "left-of", "right-of")
        ):
            rel = _RELATION_WORDS.get(tok)
            if rel is None:
                base = tok.split("-")[0]
                if tok.endswith("-of"):
                    rel = f"{base}-of"
                elif i + 1 < len(tokens) and tokens[i + 1] == "of":
                    rel = f"{base}-of"
                    i += 1
                else:
                    unparsed.append(tok)
                    i += 1
                    continue
            if clauses:
                pending_relation = rel
                relation_source = len(clauses) - 1
                flush_pending()
            else:
                unparsed.append(tok)
            clause_open = False
        elif tok in lexicon.POSES:
            if clause_open and not pending:
                clauses[-1].poses.append(tok)
            else:
                pending.append(tok)  # "flying dragon" form
        elif tok in _ARTICLES:
            pass  # articles may precede adjectives; never flush
        elif tok in _STOPWORDS:
            flush_pending()
            clause_open = False
        elif tok in lexicon.COLOR_RANGES or tok in lexicon.SIZES:
            pending.append(tok)
        else:
            pending.append(tok)  # potential style adjective for the next noun
        i += 1
    flush_pending()
    if pending_relation is not None:
        unparsed.append(pending_relation)
    if not clauses:
        raise NoEntityFound(f"no entity clause in {prompt.normalized!r}")
    return PromptAST(
        clauses=clauses,
        relations=relations,
        background=background,
        unparsed=unparsed,
        total_tokens=len(tokens),
    )


@dataclass(frozen=True)
class LayoutConstraint:
    """Either a fixed 3x3 grid anchor or a relation to another subtask."""

    anchor: str | None = None
    relative_to: int | None = None
    relation: str | None = None
    depth: int = 0

    def __post_init__(self):
        if self.anchor is not None and self.anchor not in lexicon.GRID_CELLS:
            raise ValueError(f"unknown grid cell {self.anchor!r}")
        if self.relation is not None and self.relation not in lexicon.RELATIONS:
            raise ValueError(f"unknown relation {self.relation!r}")
        if (self.relation is None) != (self.relative_to is None):
            raise ValueError("relation and relative_to must be set together")

    def to_json(self) -> dict:
        out: dict = {"depth": self.depth}
        if self.anchor is not None:
            out["anchor"] = self.anchor
        if self.relation is not None:
            out["relation"] = self.relation
            out["relative_to"] = self.relative_to
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "LayoutConstraint":
        allowed = {"anchor", "relation", "relative_to", "depth"}
        if set(obj) - allowed:
            raise MalformedRecord(f"unknown layout keys {sorted(set(obj) - allowed)}")
        try:
            return cls(
                anchor=obj.get("anchor"),
                relative_to=obj.get("relative_to"),
                relation=obj.get("relation"),
                depth=obj.get("depth", 0),
            )
        except ValueError as exc:
            raise MalformedRecord(str(exc)) from None


@dataclass(frozen=True)
class Subtask:
    id: int
    entity: str
    attributes: dict
    layout: LayoutConstraint | None = None
    kind: str = "foreground"

    def __post_init__(self):
        if not self.entity:
            raise ValueError("entity must be non-empty")
        if self.kind not in ("foreground", "background"):
            raise ValueError(f"bad subtask kind {self.kind!r}")

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "entity": self.entity,
            "kind": self.kind,
            "attributes": dict(self.attributes),
        }
        if self.layout is not None:
            out["layout"] = self.layout.to_json()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Subtask":
        allowed = {"id", "entity", "kind", "attributes", "layout"}
        if set(obj) - allowed:
            raise MalformedRecord(f"unknown subtask keys {sorted(set(obj) - allowed)}")
        layout = LayoutConstraint.from_json(obj["layout"]) if "layout" in obj else None
        try:
            return cls(
                id=obj["id"],
                entity=obj["entity"],
                attributes=dict(obj.get("attributes", {})),
                layout=layout,
                kind=obj.get("kind", "foreground"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRecord(f"bad subtask: {exc}") from None


@dataclass(frozen=True)
class SubtaskPlan:
    subtasks: tuple[Subtask, ...]
    coverage: float
    source: str = "grammar"

    def __post_init__(self):
        if len(self.subtasks) < 1:
            raise ValueError("plan needs at least one subtask")
        if not 0.0 < self.coverage <= 1.0:
            raise ValueError("coverage must be in (0,1]")
        backgrounds = [s for s in self.subtasks if s.kind == "background"]
        if len(backgrounds) > 1:
            raise ValueError("at most one background subtask")
        ids = [s.id for s in self.subtasks]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate subtask ids")

    def subtask(self, subtask_id: int) -> Subtask:
        for s in self.subtasks:
            if s.id == subtask_id:
                return s
        raise UnknownSubtask(f"no subtask {subtask_id}")

    @property
    def foregrounds(self) -> list[Subtask]:
        return [s for s in self.subtasks if s.kind == "foreground"]

    @property
    def background(self) -> Subtask | None:
        for s in self.subtasks:
            if s.kind == "background":
                return s
        return None

    def to_json(self) -> dict:
        return {
            "schema": PLAN_SCHEMA_VERSION,
            "source": self.source,
            "coverage": self.coverage,
            "subtasks": [s.to_json() for s in self.subtasks],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SubtaskPlan":
        allowed = {"schema", "source", "coverage", "subtasks"}
        if not isinstance(obj, dict) or set(obj) - allowed:
            raise MalformedRecord("bad plan document")
        if obj.get("schema") != PLAN_SCHEMA_VERSION:
            raise MalformedRecord(f"unsupported plan schema {obj.get('schema')!r}")
        try:
            plan = cls(
                subtasks=tuple(Subtask.from_json(s) for s in obj["subtasks"]),
                coverage=float(obj["coverage"]),
                source=obj.get("source", "external"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRecord(f"bad plan: {exc}") from None
        validate_plan(plan)
        return plan


def _relation_edges(plan_subtasks: list[Subtask]) -> list[tuple[int, str, int]]:
    edges = []
    ids = {s.id for s in plan_subtasks}
    for s in plan_subtasks:
        lc = s.layout
        if lc is not None and lc.relation is not None:
            if lc.relative_to not in ids:
                raise UnknownSubtask(f"relation target {lc.relative_to} not in plan")
            edges.append((s.id, lc.relation, lc.relative_to))
    return edges


def _check_acyclic(edges: list[tuple[int, int]], what: str) -> None:
    """Kahn's algorithm; raises CyclicLayout when a cycle remains."""
    nodes = {n for e in edges for n in e}
    out: dict[int, set[int]] = {n: set() for n in nodes}
    indeg: dict[int, int] = {n: 0 for n in nodes}
    for a, b in edges:
        if b not in out[a]:
            out[a].add(b)
            indeg[b] += 1
        if a == b:
            raise CyclicLayout(f"{what}: self-relation on subtask {a}")
    queue = sorted(n for n in nodes if indeg[n] == 0)
    seen = 0
    while queue:
        n = queue.pop(0)
        seen += 1
        for m in sorted(out[n]):
            indeg[m] -= 1
            if indeg[m] == 0:
                queue.append(m)
    if seen != len(nodes):
        raise CyclicLayout(f"{what}: contradictory relations")


def validate_plan(plan: SubtaskPlan) -> None:
    """Invariant checks shared by decompose, edits, and external plans."""
    if not plan.foregrounds:
        raise ValueError("plan needs at least one foreground subtask")
    edges = _relation_edges(list(plan.subtasks))
    vertical = [(a, b) for a, rel, b in edges if rel in ("above", "below")]
    horizontal = [(a, b) for a, rel, b in edges if rel in ("left-of", "right-of")]
    depth = [(a, b) for a, rel, b in edges if rel == "over"]
    _check_acyclic(vertical, "vertical layout")
    _check_acyclic(horizontal, "horizontal layout")
    _check_acyclic(depth, "depth layout")


def decompose(ast: PromptAST, config: PipelineConfig) -> SubtaskPlan:
    """Compile the AST to subtasks: one foreground per clause plus a background."""
    subtasks: list[Subtask] = []
    for idx, clause in enumerate(ast.clauses):
        attributes: dict = {}
        if clause.colors:
            attributes["color"] = clause.colors[0]
        if clause.sizes:
            attributes["size"] = clause.sizes[0]
        if clause.poses:
            attributes["pose"] = clause.poses[0]
        if clause.styles:
            attributes["style"] = " ".join(clause.styles)
        subtasks.append(
            Subtask(
                id=idx,
                entity=clause.entity,
                attributes=attributes,
                layout=LayoutConstraint(depth=idx + 1),
                kind="foreground",
            )
        )
    for src, rel, dst in ast.relations:
        base = subtasks[src]
        depth = base.layout.depth if base.layout else src + 1
        subtasks[src] = replace(
            base,
            layout=LayoutConstraint(relative_to=dst, relation=rel, depth=depth),
        )
    palette = ast.background or lexicon.DEFAULT_BACKGROUND
    subtasks.append(
        Subtask(
            id=len(ast.clauses),
            entity=lexicon.BACKGROUND_ENTITY,
            attributes={"palette": palette},
            layout=LayoutConstraint(depth=0),
            kind="background",
        )
    )
    coverage = ast.consumed_tokens / ast.total_tokens if ast.total_tokens else 1.0
    plan = SubtaskPlan(subtasks=tuple(subtasks), coverage=coverage, source="grammar")
    validate_plan(plan)
    return plan


def make_plan(prompt: PromptText, config: PipelineConfig) -> SubtaskPlan:
    return decompose(parse_prompt(prompt), config)


def plan_loss(plan: SubtaskPlan) -> float:
    """Decomposition-quality score: -ln(coverage); 0 iff every token parsed."""
    return -math.log(plan.coverage)


@dataclass(frozen=True)
class PlanEdit:
    """One structured edit: set_attribute | set_layout | add_subtask | remove_subtask."""

    op: str
    subtask_id: int | None = None
    key: str | None = None
    value: object = None
    subtask: Subtask | None = None
    layout: LayoutConstraint | None = None

    _OPS = ("set_attribute", "set_layout", "add_subtask", "remove_subtask")

    def __post_init__(self):
        if self.op not in self._OPS:
            raise ValueError(f"unknown edit op {self.op!r}")

    def to_json(self) -> dict:
        out: dict = {"op": self.op}
        if self.subtask_id is not None:
            out["subtask_id"] = self.subtask_id
        if self.key is not None:
            out["key"] = self.key
        if self.value is not None:
            out["value"] = self.value
        if self.subtask is not None:
            out["subtask"] = self.subtask.to_json()
        if self.layout is not None:
            out["layout"] = self.layout.to_json()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PlanEdit":
        allowed = {"op", "subtask_id", "key", "value", "subtask", "layout"}
        if set(obj) - allowed:
            raise MalformedRecord(f"unknown edit keys {sorted(set(obj) - allowed)}")
        try:
            return cls(
                op=obj["op"],
                subtask_id=obj.get("subtask_id"),
                key=obj.get("key"),
                value=obj.get("value"),
                subtask=Subtask.from_json(obj["subtask"]) if "subtask" in obj else None,
                layout=LayoutConstraint.from_json(obj["layout"]) if "layout" in obj else None,
            )
        except (KeyError, ValueError) as exc:
            raise MalformedRecord(f"bad edit: {exc}") from None


def apply_plan_edit(plan: SubtaskPlan, edit: PlanEdit) -> SubtaskPlan:
    """Return a new plan with the edit applied and invariants re-validated."""
    subtasks = list(plan.subtasks)
    if edit.op == "set_attribute":
        if edit.subtask_id is None or edit.key is None:
            raise MalformedRecord("set_attribute requires subtask_id and key")
        target = plan.subtask(edit.subtask_id)
        attributes = dict(target.attributes)
        if edit.value is None:
            attributes.pop(edit.key, None)
        else:
            attributes[edit.key] = edit.value
        subtasks = [
            replace(s, attributes=attributes) if s.id == edit.subtask_id else s
            for s in subtasks
        ]
    elif edit.op == "set_layout":
        plan.subtask(edit.subtask_id)
        subtasks = [
            replace(s, layout=edit.layout) if s.id == edit.subtask_id else s
            for s in subtasks
        ]
    elif edit.op == "add_subtask":
        if edit.subtask is None:
            raise MalformedRecord("add_subtask requires a subtask")
        if any(s.id == edit.subtask.id for s in subtasks):
            raise MalformedRecord(f"subtask id {edit.subtask.id} already exists")
        subtasks.append(edit.subtask)
    elif edit.op == "remove_subtask":
        plan.subtask(edit.subtask_id)  # raises UnknownSubtask
        subtasks = [s for s in subtasks if s.id != edit.subtask_id]
        if not subtasks or not any(s.kind == "foreground" for s in subtasks):
            raise ValueError("cannot remove the last foreground subtask")
    new_plan = SubtaskPlan(
        subtasks=tuple(subtasks), coverage=plan.coverage, source=plan.source
    )
    validate_plan(new_plan)
    return new_plan
