"""Domain types shared by every part of the pipeline.

Plain dataclasses with explicit dict conversion. Serialization order and
representation are part of the on-disk contract (events.ndjson, session.json),
so every ``to_dict`` builds its dict in a fixed field order and every enum is
stored as its string value.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any


class Phase(str, enum.Enum):
    INITIAL_CREATION = "InitialCreation"
    AUTO_REFINE = "AutoRefine"
    USER_REFINE = "UserRefine"
    TERMINATED = "Terminated"
    FAILED = "Failed"

    @property
    def terminal(self) -> bool:
        return self in (Phase.TERMINATED, Phase.FAILED)


# Phase may only move forward; Failed is reachable from any non-terminal phase.
LEGAL_PHASE_TRANSITIONS: dict[Phase, tuple[Phase, ...]] = {
    Phase.INITIAL_CREATION: (Phase.AUTO_REFINE, Phase.FAILED),
    Phase.AUTO_REFINE: (Phase.USER_REFINE, Phase.FAILED),
    Phase.USER_REFINE: (Phase.TERMINATED, Phase.FAILED),
    Phase.TERMINATED: (),
    Phase.FAILED: (),
}


class Role(str, enum.Enum):
    PLANNER = "planner"
    RETRIEVAL = "retrieval"
    CODING = "coding"
    CRITIC = "critic"
    VERIFICATION = "verification"
    USER = "user"


SYSTEM_ACTOR = "system"


class SubtaskStatus(str, enum.Enum):
    PENDING = "Pending"
    IN_PROGRESS = "InProgress"
    DONE = "Done"


class ExecutionErrorKind(str, enum.Enum):
    SCRIPT_EXCEPTION = "ScriptException"
    WORKER_CRASH = "WorkerCrash"
    TIMEOUT = "Timeout"
    PROTOCOL_ERROR = "ProtocolError"


class VerificationStatus(str, enum.Enum):
    RESOLVED = "Resolved"
    PARTIAL = "Partial"
    UNRESOLVED = "Unresolved"


class EventKind(str, enum.Enum):
    TURN_STARTED = "TurnStarted"
    TURN_ENDED = "TurnEnded"
    MODEL_CALL = "ModelCall"
    TOOL_CALL = "ToolCall"
    CODE_EXECUTED = "CodeExecuted"
    RENDER_PRODUCED = "RenderProduced"
    PHASE_CHANGED = "PhaseChanged"
    ERROR = "Error"
    TERMINATED = "Terminated"


class InvariantViolation(ValueError):
    """A domain invariant would be broken by the attempted construction."""


@dataclass
class Subtask:
    index: int
    description: str
    status: SubtaskStatus = SubtaskStatus.PENDING

    def to_dict(self) -> dict[str, Any]:
        return {"index": self.index, "description": self.description, "status": self.status.value}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Subtask":
        return cls(index=d["index"], description=d["description"], status=SubtaskStatus(d["status"]))


@dataclass
class ExecutionError:
    kind: ExecutionErrorKind
    message: str
    traceback: str | None = None

    def __post_init__(self) -> None:
        if self.kind is ExecutionErrorKind.SCRIPT_EXCEPTION and not self.traceback:
            raise InvariantViolation("a script exception must carry a traceback")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "message": self.message, "traceback": self.traceback}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExecutionError":
        return cls(kind=ExecutionErrorKind(d["kind"]), message=d["message"], traceback=d.get("traceback"))


@dataclass
class ExecutionOutcome:
    ok: bool
    stdout: str = ""
    stderr: str = ""
    error: ExecutionError | None = None
    wall_time_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.ok != (self.error is None):
            raise InvariantViolation("ok must be true exactly when no error is present")

    def to_dict(self) -> dict[str, Any]:
        return {
            "ok": self.ok,
            "stdout": self.stdout,
            "stderr": self.stderr,
            "error": self.error.to_dict() if self.error else None,
            "wall_time_ms": self.wall_time_ms,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExecutionOutcome":
        err = d.get("error")
        return cls(
            ok=d["ok"],
            stdout=d.get("stdout", ""),
            stderr=d.get("stderr", ""),
            error=ExecutionError.from_dict(err) if err else None,
            wall_time_ms=d.get("wall_time_ms", 0.0),
        )


@dataclass
class CodeArtifact:
    """One immutable version of the session script plus how its run went."""

    version: int
    source: str
    produced_by_phase: Phase
    provoking_input: dict[str, Any]
    execution: ExecutionOutcome | None = None

    def __post_init__(self) -> None:
        if self.version < 1:
            raise InvariantViolation("versions start at 1")
        if not self.source:
            raise InvariantViolation("artifact source must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "source": self.source,
            "produced_by_phase": self.produced_by_phase.value,
            "provoking_input": self.provoking_input,
            "execution": self.execution.to_dict() if self.execution else None,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CodeArtifact":
        execution = d.get("execution")
        return cls(
            version=d["version"],
            source=d["source"],
            produced_by_phase=Phase(d["produced_by_phase"]),
            provoking_input=d.get("provoking_input", {}),
            execution=ExecutionOutcome.from_dict(execution) if execution else None,
        )


@dataclass
class Critique:
    index: int
    problem: str
    suggested_fix: str
    related_subtask: int | None = None

    def __post_init__(self) -> None:
        if not self.problem or not self.suggested_fix:
            raise InvariantViolation("critique problem and fix must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "problem": self.problem,
            "suggested_fix": self.suggested_fix,
            "related_subtask": self.related_subtask,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Critique":
        return cls(
            index=d["index"],
            problem=d["problem"],
            suggested_fix=d["suggested_fix"],
            related_subtask=d.get("related_subtask"),
        )


@dataclass
class CritiqueRound:
    round: int
    render_set_id: str
    items: list[Critique] = field(default_factory=list)

    @property
    def approved(self) -> bool:
        return not self.items

    def to_dict(self) -> dict[str, Any]:
        return {
            "round": self.round,
            "render_set_id": self.render_set_id,
            "items": [c.to_dict() for c in self.items],
            "approved": self.approved,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CritiqueRound":
        return cls(
            round=d["round"],
            render_set_id=d["render_set_id"],
            items=[Critique.from_dict(c) for c in d.get("items", [])],
        )


@dataclass
class VerificationItem:
    critique_index: int
    status: VerificationStatus
    followup_instruction: str | None = None

    def __post_init__(self) -> None:
        if self.status is not VerificationStatus.RESOLVED and not self.followup_instruction:
            raise InvariantViolation("unresolved items must carry a follow-up instruction")

    def to_dict(self) -> dict[str, Any]:
        return {
            "critique_index": self.critique_index,
            "status": self.status.value,
            "followup_instruction": self.followup_instruction,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "VerificationItem":
        return cls(
            critique_index=d["critique_index"],
            status=VerificationStatus(d["status"]),
            followup_instruction=d.get("followup_instruction"),
        )


@dataclass
class VerificationRound:
    round: int
    render_set_id_after: str
    render_set_id_before: str
    items: list[VerificationItem] = field(default_factory=list)

    @property
    def all_resolved(self) -> bool:
        return bool(self.items) and all(i.status is VerificationStatus.RESOLVED for i in self.items)

    def to_dict(self) -> dict[str, Any]:
        return {
            "round": self.round,
            "render_set_id_after": self.render_set_id_after,
            "render_set_id_before": self.render_set_id_before,
            "items": [i.to_dict() for i in self.items],
            "all_resolved": self.all_resolved,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "VerificationRound":
        return cls(
            round=d["round"],
            render_set_id_after=d["render_set_id_after"],
            render_set_id_before=d["render_set_id_before"],
            items=[VerificationItem.from_dict(i) for i in d.get("items", [])],
        )


@dataclass
class RenderView:
    image_path: str
    azimuth_deg: float
    elevation_deg: float
    camera_distance: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "image_path": self.image_path,
            "azimuth_deg": self.azimuth_deg,
            "elevation_deg": self.elevation_deg,
            "camera_distance": self.camera_distance,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RenderView":
        return cls(
            image_path=d["image_path"],
            azimuth_deg=d["azimuth_deg"],
            elevation_deg=d["elevation_deg"],
            camera_distance=d["camera_distance"],
        )


@dataclass
class RenderSet:
    render_set_id: str
    view_count: int
    views: list[RenderView]
    bbox: list[list[float]]  # [[min x,y,z], [max x,y,z]] in scene units

    def __post_init__(self) -> None:
        if self.view_count != len(self.views):
            raise InvariantViolation("view_count must equal the number of views")

    def to_dict(self) -> dict[str, Any]:
        return {
            "render_set_id": self.render_set_id,
            "view_count": self.view_count,
            "views": [v.to_dict() for v in self.views],
            "bbox": self.bbox,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RenderSet":
        return cls(
            render_set_id=d["render_set_id"],
            view_count=d["view_count"],
            views=[RenderView.from_dict(v) for v in d.get("views", [])],
            bbox=d.get("bbox", [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
        )


@dataclass
class RefinementRequest:
    text: str
    submitted_at: float
    terminator: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"text": self.text, "submitted_at": self.submitted_at, "terminator": self.terminator}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RefinementRequest":
        return cls(text=d["text"], submitted_at=d.get("submitted_at", 0.0), terminator=d.get("terminator", False))


@dataclass
class Event:
    seq: int
    timestamp: float
    actor: str
    kind: EventKind
    payload: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "timestamp": self.timestamp,
            "actor": self.actor,
            "kind": self.kind.value,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Event":
        return cls(
            seq=d["seq"],
            timestamp=d["timestamp"],
            actor=d["actor"],
            kind=EventKind(d["kind"]),
            payload=d.get("payload", {}),
        )


@dataclass
class SessionConfig:
    m_views: int = 5
    max_exec_retries: int = 5
    max_critique_rounds: int = 3
    max_verification_rounds: int = 3
    termination_keyword: str = "COMPLETE"
    model_bindings: dict[str, str] = field(default_factory=dict)
    render_resolution: int = 768
    render_fov_deg: float = 50.0
    camera_margin: float = 1.2
    exec_timeout_s: float = 120.0
    exec_mode: str = "rebuild"  # "rebuild" resets the scene before every run of the full script
    context_recent_events: int = 20
    context_token_budget: int = 24000

    def to_dict(self) -> dict[str, Any]:
        return {
            "m_views": self.m_views,
            "max_exec_retries": self.max_exec_retries,
            "max_critique_rounds": self.max_critique_rounds,
            "max_verification_rounds": self.max_verification_rounds,
            "termination_keyword": self.termination_keyword,
            "model_bindings": dict(sorted(self.model_bindings.items())),
            "render_resolution": self.render_resolution,
            "render_fov_deg": self.render_fov_deg,
            "camera_margin": self.camera_margin,
            "exec_timeout_s": self.exec_timeout_s,
            "exec_mode": self.exec_mode,
            "context_recent_events": self.context_recent_events,
            "context_token_budget": self.context_token_budget,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SessionConfig":
        known = {f: d[f] for f in cls().to_dict() if f in d}
        return cls(**known)


@dataclass
class SessionState:
    session_id: str
    goal: str
    phase: Phase = Phase.INITIAL_CREATION
    subtasks: list[Subtask] = field(default_factory=list)
    code_versions: list[CodeArtifact] = field(default_factory=list)
    critiques: list[CritiqueRound] = field(default_factory=list)
    verifications: list[VerificationRound] = field(default_factory=list)
    render_sets: list[RenderSet] = field(default_factory=list)
    refinements: list[RefinementRequest] = field(default_factory=list)
    event_log: list[Event] = field(default_factory=list)
    config: SessionConfig = field(default_factory=SessionConfig)

    @property
    def latest_code(self) -> CodeArtifact | None:
        return self.code_versions[-1] if self.code_versions else None

    @property
    def latest_ok_code(self) -> CodeArtifact | None:
        for artifact in reversed(self.code_versions):
            if artifact.execution is not None and artifact.execution.ok:
                return artifact
        return None

    @property
    def latest_render_set(self) -> RenderSet | None:
        return self.render_sets[-1] if self.render_sets else None

    def render_set(self, render_set_id: str) -> RenderSet:
        for rs in self.render_sets:
            if rs.render_set_id == render_set_id:
                return rs
        raise KeyError(f"unknown render set {render_set_id!r}")

    def to_dict(self) -> dict[str, Any]:
        """Snapshot used for session.json and for field-by-field state comparison."""
        return {
            "session_id": self.session_id,
            "goal": self.goal,
            "phase": self.phase.value,
            "subtasks": [s.to_dict() for s in self.subtasks],
            "code_versions": [c.to_dict() for c in self.code_versions],
            "critiques": [c.to_dict() for c in self.critiques],
            "verifications": [v.to_dict() for v in self.verifications],
            "render_sets": [r.to_dict() for r in self.render_sets],
            "refinements": [r.to_dict() for r in self.refinements],
            "config": self.config.to_dict(),
            "event_count": len(self.event_log),
        }
