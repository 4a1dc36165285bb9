"""Append-only session event log with a deterministic state projection.

The event log is the single source of truth. ``apply_event`` folds one event
into a ``SessionState``; the store maintains its in-memory state through the
same fold it would use to rebuild from disk, so a replayed log always lands on
the same state.

On-disk layout, one directory per session::

    <base>/<session_id>/
        events.ndjson            one JSON object per line, fields exactly as Event
        code/v{N}.py             script source bytes per version
        renders/{set}/view{K}.png
        session.json             latest projected state snapshot

All artifact paths inside events are stored relative to the session directory
so logs compare equal across machines and base directories.
"""

from __future__ import annotations

import json
import os
import threading
import time
import uuid
from pathlib import Path
from typing import Any, Callable, Iterable

from .types import (
    CodeArtifact,
    CritiqueRound,
    Event,
    EventKind,
    ExecutionOutcome,
    Phase,
    RefinementRequest,
    RenderSet,
    Role,
    SessionConfig,
    SessionState,
    Subtask,
    SubtaskStatus,
    VerificationRound,
)


class StoreError(Exception):
    pass


class SequenceGapError(StoreError):
    """An appended event does not carry the successor sequence number."""


class UnknownSessionError(StoreError):
    pass


def json_line(obj: dict[str, Any]) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def apply_event(state: SessionState, event: Event) -> SessionState:
    """Fold one event into the state. Mutates and returns ``state``."""
    state.event_log.append(event)
    kind = event.kind
    payload = event.payload

    if kind is EventKind.PHASE_CHANGED:
        state.phase = Phase(payload["to"])
        if "goal" in payload:
            state.goal = payload["goal"]
        if "config" in payload:
            state.config = SessionConfig.from_dict(payload["config"])

    elif kind is EventKind.TERMINATED:
        state.phase = Phase.TERMINATED

    elif kind is EventKind.TURN_STARTED:
        index = payload.get("subtask_index")
        if index is not None:
            for subtask in state.subtasks:
                if subtask.index == index and subtask.status is SubtaskStatus.PENDING:
                    subtask.status = SubtaskStatus.IN_PROGRESS

    elif kind is EventKind.TURN_ENDED:
        role = payload.get("role")
        if role == Role.PLANNER.value and "subtasks" in payload:
            state.subtasks = [
                Subtask(index=s["index"], description=s["description"]) for s in payload["subtasks"]
            ]
        elif role == Role.CRITIC.value and "critique_round" in payload:
            state.critiques.append(CritiqueRound.from_dict(payload["critique_round"]))
        elif role == Role.VERIFICATION.value and "verification_round" in payload:
            state.verifications.append(VerificationRound.from_dict(payload["verification_round"]))
        elif role == Role.USER.value and "refinement" in payload:
            state.refinements.append(RefinementRequest.from_dict(payload["refinement"]))

    elif kind is EventKind.CODE_EXECUTED:
        artifact = CodeArtifact(
            version=payload["version"],
            source=payload["source"],
            produced_by_phase=Phase(payload["produced_by_phase"]),
            provoking_input=payload.get("provoking_input", {}),
            execution=ExecutionOutcome.from_dict(
                {k: payload[k] for k in ("ok", "stdout", "stderr", "error", "wall_time_ms")}
            ),
        )
        state.code_versions.append(artifact)
        provoking = payload.get("provoking_input", {})
        if payload["ok"] and provoking.get("kind") == "subtask":
            for subtask in state.subtasks:
                if subtask.index == provoking.get("index"):
                    subtask.status = SubtaskStatus.DONE

    elif kind is EventKind.RENDER_PRODUCED:
        state.render_sets.append(RenderSet.from_dict(payload["render_set"]))

    # ModelCall / ToolCall / Error carry no projected state beyond the log itself.
    return state


def project(events: Iterable[Event], session_id: str) -> SessionState:
    """Rebuild a session state by folding its event log from scratch."""
    state = SessionState(session_id=session_id, goal="")
    for event in events:
        apply_event(state, event)
    return state


class _SessionHandle:
    def __init__(self, state: SessionState, directory: Path):
        self.state = state
        self.directory = directory
        self.lock = threading.RLock()
        self.changed = threading.Condition(self.lock)


class SessionStore:
    """Owns session directories, event persistence, and the projected states.

    One writer per session (the orchestrator turn loop); any number of readers.
    ``clock`` is injectable so tests can pin timestamps.
    """

    def __init__(self, base_dir: str | Path, clock: Callable[[], float] | None = None):
        self.base_dir = Path(base_dir)
        self.base_dir.mkdir(parents=True, exist_ok=True)
        self.clock = clock or time.time
        self._sessions: dict[str, _SessionHandle] = {}
        self._registry_lock = threading.Lock()

    # -- lifecycle ---------------------------------------------------------

    def create_session(
        self,
        goal: str,
        config: SessionConfig | None = None,
        session_id: str | None = None,
    ) -> SessionState:
        if not goal:
            raise StoreError("goal must be non-empty")
        session_id = session_id or uuid.uuid4().hex[:12]
        directory = self.base_dir / session_id
        if directory.exists():
            raise StoreError(f"session directory already exists: {directory}")
        directory.mkdir(parents=True)
        (directory / "code").mkdir()
        (directory / "renders").mkdir()

        handle = _SessionHandle(SessionState(session_id=session_id, goal=goal), directory)
        with self._registry_lock:
            self._sessions[session_id] = handle

        config = config or SessionConfig()
        self.append(
            session_id,
            actor="system",
            kind=EventKind.PHASE_CHANGED,
            payload={
                "from": None,
                "to": Phase.INITIAL_CREATION.value,
                "goal": goal,
                "config": config.to_dict(),
            },
        )
        return handle.state

    def load_session(self, session_id: str) -> SessionState:
        """Fold a session back in from disk (no-op if already resident)."""
        with self._registry_lock:
            if session_id in self._sessions:
                return self._sessions[session_id].state
        directory = self.base_dir / session_id
        events_file = directory / "events.ndjson"
        if not events_file.exists():
            raise UnknownSessionError(f"no session at {directory}")
        state = project(read_events(directory), session_id)
        handle = _SessionHandle(state, directory)
        with self._registry_lock:
            self._sessions[session_id] = handle
        return state

    def list_session_ids(self) -> list[str]:
        on_disk = {p.name for p in self.base_dir.iterdir() if (p / "events.ndjson").exists()}
        with self._registry_lock:
            on_disk.update(self._sessions)
        return sorted(on_disk)

    def session_dir(self, session_id: str) -> Path:
        return self._handle(session_id).directory

    def _handle(self, session_id: str) -> _SessionHandle:
        with self._registry_lock:
            handle = self._sessions.get(session_id)
        if handle is None:
            self.load_session(session_id)
            with self._registry_lock:
                handle = self._sessions[session_id]
        return handle

    # -- event log ---------------------------------------------------------

    def append(self, session_id: str, actor: str, kind: EventKind, payload: dict[str, Any]) -> Event:
        handle = self._handle(session_id)
        with handle.lock:
            event = Event(
                seq=len(handle.state.event_log) + 1,
                timestamp=self.clock(),
                actor=actor,
                kind=kind,
                payload=payload,
            )
            return self._append_locked(handle, event)

    def append_event(self, session_id: str, event: Event) -> Event:
        """Append a fully formed event; the seq must be the successor."""
        handle = self._handle(session_id)
        with handle.lock:
            return self._append_locked(handle, event)

    def _append_locked(self, handle: _SessionHandle, event: Event) -> Event:
        expected = len(handle.state.event_log) + 1
        if event.seq != expected:
            raise SequenceGapError(f"expected seq {expected}, got {event.seq}")
        line = json_line(event.to_dict()) + "\n"
        path = handle.directory / "events.ndjson"
        try:
            with open(path, "a", encoding="utf-8") as f:
                f.write(line)
                f.flush()
                os.fsync(f.fileno())
        except OSError as exc:
            raise StoreError(f"failed to persist event {event.seq}: {exc}") from exc
        apply_event(handle.state, event)
        self._write_snapshot(handle)
        handle.changed.notify_all()
        return event

    def _write_snapshot(self, handle: _SessionHandle) -> None:
        snapshot = json.dumps(handle.state.to_dict(), ensure_ascii=False, indent=2, sort_keys=True)
        (handle.directory / "session.json").write_text(snapshot + "\n", encoding="utf-8")

    def state(self, session_id: str) -> SessionState:
        return self._handle(session_id).state

    def events(self, session_id: str, from_seq: int = 1) -> list[Event]:
        handle = self._handle(session_id)
        with handle.lock:
            return [e for e in handle.state.event_log if e.seq >= from_seq]

    def wait_for_events(self, session_id: str, after_seq: int, timeout: float) -> list[Event]:
        """Block until events past ``after_seq`` exist (or timeout); return them."""
        handle = self._handle(session_id)
        with handle.changed:
            handle.changed.wait_for(
                lambda: len(handle.state.event_log) > after_seq, timeout=timeout
            )
            return [e for e in handle.state.event_log if e.seq > after_seq]

    # -- artifacts ---------------------------------------------------------

    def write_code(self, session_id: str, version: int, source: str) -> Path:
        path = self.session_dir(session_id) / "code" / f"v{version}.py"
        path.write_text(source, encoding="utf-8")
        return path

    def read_code(self, session_id: str, version: int) -> bytes:
        path = self.session_dir(session_id) / "code" / f"v{version}.py"
        if not path.exists():
            raise UnknownSessionError(f"no code version {version} for session {session_id}")
        return path.read_bytes()

    def render_dir(self, session_id: str, render_set_id: str) -> Path:
        path = self.session_dir(session_id) / "renders" / render_set_id
        path.mkdir(parents=True, exist_ok=True)
        return path

    def resolve(self, session_id: str, relative: str) -> Path:
        return self.session_dir(session_id) / relative


def read_events(session_dir: str | Path) -> list[Event]:
    """Parse events.ndjson from a session directory."""
    path = Path(session_dir) / "events.ndjson"
    events = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                events.append(Event.from_dict(json.loads(line)))
    return events


_TIMING_KEYS = {"timestamp", "wall_time_ms", "latency_ms", "submitted_at"}


def _mask_timing(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: (0 if k in _TIMING_KEYS else _mask_timing(v)) for k, v in value.items()}
    if isinstance(value, list):
        return [_mask_timing(v) for v in value]
    return value


def normalized_log(session_dir: str | Path) -> list[str]:
    """events.ndjson lines with wall-clock fields masked, for run-to-run comparison."""
    lines = []
    path = Path(session_dir) / "events.ndjson"
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                lines.append(json_line(_mask_timing(json.loads(line))))
    return lines
