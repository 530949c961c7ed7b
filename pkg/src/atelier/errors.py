"""Exception hierarchy shared across the pipeline."""


class AtelierError(Exception):
    """Base class for all package errors."""

    code = "error"


class MalformedRecord(AtelierError):
    """Byte stream or JSON document does not match the expected schema."""

    code = "malformed_record"

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at {position})"
        super().__init__(message)


class IllegalTransition(AtelierError):
    """Event kind is not legal in the session's current state."""

    code = "illegal_transition"

    def __init__(self, state, kind):
        self.state = state
        self.kind = kind
        super().__init__(f"event {kind!r} is illegal in state {state!r}")


class NoEntityFound(AtelierError):
    """Prompt parsed to zero entity clauses."""

    code = "no_entity_found"


class CyclicLayout(AtelierError):
    """Layout relations are contradictory or exceed the grid."""

    code = "cyclic_layout"


class UnknownSubtask(AtelierError):
    """Plan edit targets a subtask id that does not exist."""

    code = "unknown_subtask"


class UnknownEntity(AtelierError):
    """Entity token has no procedural glyph."""

    code = "unknown_entity"


class RetriesExhausted(AtelierError):
    """Component used up every regeneration attempt."""

    code = "retries_exhausted"


class SessionFailure(AtelierError):
    """Strict review policy failed the session."""

    code = "session_failure"


class MissingPlacement(AtelierError):
    """Component has no placement in the layout."""

    code = "missing_placement"


class SolverDiverged(AtelierError):
    """Iterative Poisson solve produced a non-finite residual."""

    code = "solver_diverged"


class CapacityExceeded(AtelierError):
    """Watermark payload does not fit the image's coefficient slots."""

    code = "capacity_exceeded"


class DimensionMismatch(AtelierError):
    """Operation requires images of identical dimensions."""

    code = "dimension_mismatch"


class ScorerUnavailable(AtelierError):
    """External alignment scorer could not be reached."""

    code = "scorer_unavailable"


class GeneratorUnavailable(AtelierError):
    """External generator backend could not be reached."""

    code = "generator_unavailable"


class PlannerUnavailable(AtelierError):
    """External planner backend could not be reached."""

    code = "planner_unavailable"


class UnknownSession(AtelierError):
    """Session id is not present in the store."""

    code = "unknown_session"


class IllegalIntervention(AtelierError):
    """Intervention kind is not legal in the session's current state."""

    code = "illegal_intervention"


class NotReady(AtelierError):
    """Requested output exists only once the session is Done."""

    code = "not_ready"
