"""Turn loop and routing for the three-phase creation pipeline.

``select_next`` is a pure function of (session state, phase machine, last
decisive event): no model is ever consulted for routing, so a fixed scripted
backend yields a byte-identical event log on every run.

Phase wiring:

* Initial creation: planner once, then per subtask retrieval -> coding ->
  execute, with an error loop (retrieval on the error message -> coding ->
  execute) until the run is clean. Each failed execution counts against
  ``max_exec_retries``; hitting the cap fails the session.
* Auto refine: render -> critic; if critiques exist, coding -> execute ->
  render -> verification, looping follow-ups back to coding until everything
  resolves or ``max_verification_rounds`` is hit (cap advances with a warning
  rather than failing, since imperfect auto-refinement flows into the user
  phase).
* User refine: each request runs coding -> execute -> render -> verification
  and returns to awaiting input; the configured keyword terminates.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

from . import agents as agents_mod
from .agents import AgentSpec, QueryKind, RetrievalUnavailableError
from .context import assemble_context
from .docrag import RetrievalIndex
from .gateway import (
    FixtureMismatchError,
    Gateway,
    GatewayError,
    ReplayDivergenceError,
)
from .store import SessionStore
from .types import (
    Critique,
    CritiqueRound,
    Event,
    EventKind,
    ExecutionError,
    ExecutionOutcome,
    Phase,
    RefinementRequest,
    RenderSet,
    RenderView,
    Role,
    SessionState,
    Subtask,
    VerificationRound,
)

log = logging.getLogger(__name__)


class IllegalStateError(Exception):
    """The last event cannot occur in the current phase."""


class NextActor(str, enum.Enum):
    PLANNER = "planner"
    RETRIEVAL = "retrieval"
    CODING = "coding"
    CRITIC = "critic"
    VERIFICATION = "verification"
    USER_PROXY = "user"
    RENDER_TOOL = "render"
    HALT = "halt"


class Reason(str, enum.Enum):
    PLAN_READY = "PlanReady"
    SUBTASK_NEXT = "SubtaskNext"
    EXEC_ERROR = "ExecError"
    EXEC_OK = "ExecOk"
    CRITIQUE_FOUND = "CritiqueFound"
    CRITIQUE_CLEAN = "CritiqueClean"
    VERIFY_FAILED = "VerifyFailed"
    VERIFY_PASSED = "VerifyPassed"
    USER_INPUT = "UserInput"
    TERMINATOR = "Terminator"
    CAP_EXHAUSTED = "CapExhausted"


_HALT_REASONS = {Reason.TERMINATOR, Reason.CAP_EXHAUSTED, Reason.VERIFY_PASSED}


@dataclass
class TurnDecision:
    next_actor: NextActor
    reason: Reason

    def __post_init__(self) -> None:
        if self.next_actor is NextActor.HALT and self.reason not in _HALT_REASONS:
            raise IllegalStateError(f"halt is not legal with reason {self.reason.value}")


@dataclass
class PhaseMachine:
    phase: Phase
    subtask_index: int = 1
    retry_count: int = 0
    critique_round: int = 0
    verification_round: int = 0
    pending_error: ExecutionError | None = None
    current_critiques: list[Critique] = field(default_factory=list)
    pending_followups: list[tuple[int, str]] = field(default_factory=list)
    before_render_id: str | None = None


def select_next(state: SessionState, machine: PhaseMachine, last_event: Event) -> TurnDecision:
    """Decide who acts next. Pure and deterministic; raises on impossible input."""
    if state.phase.terminal:
        raise IllegalStateError(f"session is {state.phase.value}")
    kind = last_event.kind
    payload = last_event.payload

    if machine.phase is Phase.INITIAL_CREATION:
        if kind is EventKind.PHASE_CHANGED and payload.get("to") == Phase.INITIAL_CREATION.value:
            return TurnDecision(NextActor.PLANNER, Reason.PLAN_READY)
        if kind is EventKind.TURN_ENDED and payload.get("role") == Role.PLANNER.value:
            return TurnDecision(NextActor.RETRIEVAL, Reason.PLAN_READY)
        if kind is EventKind.TURN_ENDED and payload.get("role") == Role.RETRIEVAL.value:
            reason = (
                Reason.EXEC_ERROR
                if payload.get("query_kind") == QueryKind.ERROR_MESSAGE
                else Reason.SUBTASK_NEXT
            )
            return TurnDecision(NextActor.CODING, reason)
        if kind is EventKind.CODE_EXECUTED:
            if not payload["ok"]:
                if machine.retry_count >= state.config.max_exec_retries:
                    return TurnDecision(NextActor.HALT, Reason.CAP_EXHAUSTED)
                return TurnDecision(NextActor.RETRIEVAL, Reason.EXEC_ERROR)
            if machine.subtask_index < len(state.subtasks):
                return TurnDecision(NextActor.RETRIEVAL, Reason.SUBTASK_NEXT)
            return TurnDecision(NextActor.RENDER_TOOL, Reason.EXEC_OK)
        raise IllegalStateError(f"{kind.value} is impossible during initial creation")

    if machine.phase is Phase.AUTO_REFINE:
        if kind is EventKind.PHASE_CHANGED and payload.get("to") == Phase.AUTO_REFINE.value:
            return TurnDecision(NextActor.RENDER_TOOL, Reason.EXEC_OK)
        if kind is EventKind.RENDER_PRODUCED:
            if payload.get("purpose") == "critique":
                return TurnDecision(NextActor.CRITIC, Reason.EXEC_OK)
            return TurnDecision(NextActor.VERIFICATION, Reason.EXEC_OK)
        if kind is EventKind.TURN_ENDED and payload.get("role") == Role.CRITIC.value:
            if payload["critique_round"]["approved"]:
                return TurnDecision(NextActor.USER_PROXY, Reason.CRITIQUE_CLEAN)
            return TurnDecision(NextActor.CODING, Reason.CRITIQUE_FOUND)
        if kind is EventKind.TURN_ENDED and payload.get("role") == Role.RETRIEVAL.value:
            return TurnDecision(NextActor.CODING, Reason.EXEC_ERROR)
        if kind is EventKind.CODE_EXECUTED:
            if not payload["ok"]:
                if machine.retry_count >= state.config.max_exec_retries:
                    return TurnDecision(NextActor.HALT, Reason.CAP_EXHAUSTED)
                return TurnDecision(NextActor.RETRIEVAL, Reason.EXEC_ERROR)
            return TurnDecision(NextActor.RENDER_TOOL, Reason.EXEC_OK)
        if kind is EventKind.TURN_ENDED and payload.get("role") == Role.VERIFICATION.value:
            if payload["verification_round"]["all_resolved"]:
                return TurnDecision(NextActor.HALT, Reason.VERIFY_PASSED)
            if machine.verification_round >= state.config.max_verification_rounds:
                return TurnDecision(NextActor.HALT, Reason.CAP_EXHAUSTED)
            return TurnDecision(NextActor.CODING, Reason.VERIFY_FAILED)
        raise IllegalStateError(f"{kind.value} is impossible during auto refinement")

    if machine.phase is Phase.USER_REFINE:
        if kind is EventKind.TURN_ENDED and payload.get("role") == Role.USER.value:
            if payload["refinement"]["terminator"]:
                return TurnDecision(NextActor.HALT, Reason.TERMINATOR)
            return TurnDecision(NextActor.CODING, Reason.USER_INPUT)
        if kind is EventKind.TURN_ENDED and payload.get("role") == Role.RETRIEVAL.value:
            return TurnDecision(NextActor.CODING, Reason.EXEC_ERROR)
        if kind is EventKind.CODE_EXECUTED:
            if not payload["ok"]:
                if machine.retry_count >= state.config.max_exec_retries:
                    return TurnDecision(NextActor.HALT, Reason.CAP_EXHAUSTED)
                return TurnDecision(NextActor.RETRIEVAL, Reason.EXEC_ERROR)
            return TurnDecision(NextActor.RENDER_TOOL, Reason.EXEC_OK)
        if kind is EventKind.RENDER_PRODUCED:
            return TurnDecision(NextActor.VERIFICATION, Reason.EXEC_OK)
        if kind is EventKind.TURN_ENDED and payload.get("role") == Role.VERIFICATION.value:
            if payload["verification_round"]["all_resolved"]:
                return TurnDecision(NextActor.USER_PROXY, Reason.VERIFY_PASSED)
            if machine.verification_round >= state.config.max_verification_rounds:
                return TurnDecision(NextActor.USER_PROXY, Reason.CAP_EXHAUSTED)
            return TurnDecision(NextActor.CODING, Reason.VERIFY_FAILED)
        raise IllegalStateError(f"{kind.value} is impossible during user refinement")

    raise IllegalStateError(f"no turns are possible in phase {machine.phase.value}")


class Executor(Protocol):
    """What the orchestrator needs from an execution backend."""

    def execute(self, source: str, timeout: float | None = None) -> ExecutionOutcome: ...

    def render(self, render_set_id: str, out_dir: Path, m: int, resolution: int) -> RenderSet: ...


class SessionFailed(Exception):
    pass


class Orchestrator:
    """Drives one session's turns against a store, a gateway, and an executor."""

    def __init__(
        self,
        store: SessionStore,
        session_id: str,
        backend: Any,
        executor: Executor,
        rag_index: RetrievalIndex | None = None,
        agent_specs: dict[Role, AgentSpec] | None = None,
    ):
        self.store = store
        self.session_id = session_id
        self.executor = executor
        self.rag_index = rag_index
        self.agents = agent_specs or agents_mod.default_agents()
        self.gateway = Gateway(
            backend, sink=self._record_model_call, base_dir=store.session_dir(session_id)
        )

    # -- plumbing ------------------------------------------------------------

    @property
    def state(self) -> SessionState:
        return self.store.state(self.session_id)

    def _emit(self, actor: str, kind: EventKind, payload: dict[str, Any]) -> Event:
        return self.store.append(self.session_id, actor=actor, kind=kind, payload=payload)

    def _record_model_call(self, record: dict[str, Any]) -> None:
        self._emit(record["role"], EventKind.MODEL_CALL, record)

    def _model_for(self, role: Role) -> str:
        return self.state.config.model_bindings.get(role.value, "")

    def _change_phase(self, to: Phase) -> Event:
        return self._emit(
            "system",
            EventKind.PHASE_CHANGED,
            {"from": self.state.phase.value, "to": to.value},
        )

    def _fail(self, message: str, error: ExecutionError | None = None) -> None:
        self._emit(
            "system",
            EventKind.ERROR,
            {
                "warning": False,
                "reason": Reason.CAP_EXHAUSTED.value,
                "message": message,
                "last_error": error.to_dict() if error else None,
            },
        )
        self._change_phase(Phase.FAILED)

    def _warn(self, reason: Reason, message: str) -> None:
        self._emit(
            "system",
            EventKind.ERROR,
            {"warning": True, "reason": reason.value, "message": message},
        )

    # -- agent turns -----------------------------------------------------------

    def run_plan(self) -> Event:
        spec = self.agents[Role.PLANNER]
        self._emit(Role.PLANNER.value, EventKind.TURN_STARTED, {"role": Role.PLANNER.value})
        subtasks = agents_mod.plan(
            self.state.goal, self.gateway, spec, model=self._model_for(Role.PLANNER)
        )
        return self._emit(
            Role.PLANNER.value,
            EventKind.TURN_ENDED,
            {
                "role": Role.PLANNER.value,
                "subtasks": [{"index": s.index, "description": s.description} for s in subtasks],
                "complete": True,
            },
        )

    def _retrieval_turn(self, query: str, query_kind: str, subtask_index: int | None,
                        error: ExecutionError | None = None) -> Event:
        spec = self.agents[Role.RETRIEVAL]
        self._emit(
            Role.RETRIEVAL.value,
            EventKind.TURN_STARTED,
            {"role": Role.RETRIEVAL.value, "subtask_index": subtask_index, "query_kind": query_kind},
        )
        self._emit(
            Role.RETRIEVAL.value,
            EventKind.TOOL_CALL,
            {
                "tool": agents_mod.RETRIEVE_INFORMATION_TOOL["name"],
                "arguments": {"query": query, "kind": query_kind},
            },
        )
        summary_payload = None
        try:
            summary = agents_mod.retrieve_and_summarize(
                query,
                query_kind,
                self.rag_index,
                self.gateway,
                spec,
                model=self._model_for(Role.RETRIEVAL),
                error=error,
            )
            summary_payload = summary.to_dict()
        except RetrievalUnavailableError as exc:
            self._warn(Reason.EXEC_ERROR, f"retrieval unavailable: {exc}; continuing without notes")
        return self._emit(
            Role.RETRIEVAL.value,
            EventKind.TURN_ENDED,
            {
                "role": Role.RETRIEVAL.value,
                "subtask_index": subtask_index,
                "query_kind": query_kind,
                "summary": summary_payload,
            },
        )

    def _coding_turn(
        self,
        purpose: str,
        instruction: str,
        subtask_index: int | None = None,
        round_no: int | None = None,
    ) -> Event:
        spec = self.agents[Role.CODING]
        started: dict[str, Any] = {"role": Role.CODING.value, "purpose": purpose}
        if subtask_index is not None:
            started["subtask_index"] = subtask_index
        if round_no is not None:
            started["round"] = round_no
        self._emit(Role.CODING.value, EventKind.TURN_STARTED, started)

        bundle = assemble_context(self.state, Role.CODING.value)
        source = agents_mod.code_step(
            bundle, instruction, self.gateway, spec, model=self._model_for(Role.CODING)
        )
        self._emit(
            Role.CODING.value,
            EventKind.TOOL_CALL,
            {"tool": agents_mod.EXECUTE_CODE_TOOL["name"], "arguments": {"code": source}},
        )
        version = len(self.state.code_versions) + 1
        outcome = self.executor.execute(source, timeout=self.state.config.exec_timeout_s)
        self.store.write_code(self.session_id, version, source)
        provoking: dict[str, Any] = {"kind": purpose}
        if subtask_index is not None:
            provoking["index"] = subtask_index
        if round_no is not None:
            provoking["round"] = round_no
        executed = self._emit(
            Role.CODING.value,
            EventKind.CODE_EXECUTED,
            {
                "version": version,
                "source": source,
                "ok": outcome.ok,
                "stdout": outcome.stdout,
                "stderr": outcome.stderr,
                "error": outcome.error.to_dict() if outcome.error else None,
                "wall_time_ms": outcome.wall_time_ms,
                "produced_by_phase": self.state.phase.value,
                "provoking_input": provoking,
            },
        )
        self._emit(
            Role.CODING.value,
            EventKind.TURN_ENDED,
            {"role": Role.CODING.value, "version": version, "ok": outcome.ok},
        )
        return executed

    def _render_step(self, purpose: str) -> Event:
        state = self.state
        render_set_id = f"rs{len(state.render_sets) + 1}"
        out_dir = self.store.render_dir(self.session_id, render_set_id)
        self._emit(
            "system",
            EventKind.TOOL_CALL,
            {
                "tool": "render_views",
                "arguments": {
                    "render_set_id": render_set_id,
                    "view_count": state.config.m_views,
                    "resolution": state.config.render_resolution,
                    "purpose": purpose,
                },
            },
        )
        rendered = self.executor.render(
            render_set_id, out_dir, state.config.m_views, state.config.render_resolution
        )
        session_dir = self.store.session_dir(self.session_id)
        relative_views = []
        for view in rendered.views:
            path = Path(view.image_path)
            rel = path.relative_to(session_dir).as_posix() if path.is_absolute() else view.image_path
            relative_views.append(
                RenderView(
                    image_path=rel,
                    azimuth_deg=view.azimuth_deg,
                    elevation_deg=view.elevation_deg,
                    camera_distance=view.camera_distance,
                )
            )
        record = RenderSet(
            render_set_id=render_set_id,
            view_count=rendered.view_count,
            views=relative_views,
            bbox=rendered.bbox,
        )
        return self._emit(
            "system",
            EventKind.RENDER_PRODUCED,
            {"render_set": record.to_dict(), "purpose": purpose},
        )

    def _critic_turn(self, round_no: int) -> Event:
        spec = self.agents[Role.CRITIC]
        state = self.state
        render_set = state.latest_render_set
        assert render_set is not None
        self._emit(
            Role.CRITIC.value,
            EventKind.TURN_STARTED,
            {"role": Role.CRITIC.value, "round": round_no},
        )
        self._emit(
            Role.CRITIC.value,
            EventKind.TOOL_CALL,
            {
                "tool": agents_mod.CRITIQUE_SCENE_TOOL["name"],
                "arguments": {"target_prompt": state.goal, "render_set_id": render_set.render_set_id},
            },
        )
        items = agents_mod.critique(
            render_set, state.goal, self.gateway, spec, model=self._model_for(Role.CRITIC)
        )
        round_record = CritiqueRound(
            round=round_no, render_set_id=render_set.render_set_id, items=items
        )
        return self._emit(
            Role.CRITIC.value,
            EventKind.TURN_ENDED,
            {"role": Role.CRITIC.value, "critique_round": round_record.to_dict()},
        )

    def _verification_turn(
        self, round_no: int, before_id: str, critiques: list[Critique]
    ) -> Event:
        spec = self.agents[Role.VERIFICATION]
        state = self.state
        after = state.latest_render_set
        assert after is not None
        before = state.render_set(before_id)
        self._emit(
            Role.VERIFICATION.value,
            EventKind.TURN_STARTED,
            {"role": Role.VERIFICATION.value, "round": round_no},
        )
        self._emit(
            Role.VERIFICATION.value,
            EventKind.TOOL_CALL,
            {
                "tool": agents_mod.VERIFY_SCENE_TOOL["name"],
                "arguments": {
                    "render_set_id_before": before_id,
                    "render_set_id_after": after.render_set_id,
                },
            },
        )
        items = agents_mod.verify(
            before, after, critiques, self.gateway, spec, model=self._model_for(Role.VERIFICATION)
        )
        round_record = VerificationRound(
            round=round_no,
            render_set_id_after=after.render_set_id,
            render_set_id_before=before_id,
            items=items,
        )
        return self._emit(
            Role.VERIFICATION.value,
            EventKind.TURN_ENDED,
            {"role": Role.VERIFICATION.value, "verification_round": round_record.to_dict()},
        )

    def _user_turn(self, request: RefinementRequest) -> Event:
        self._emit(Role.USER.value, EventKind.TURN_STARTED, {"role": Role.USER.value})
        return self._emit(
            Role.USER.value,
            EventKind.TURN_ENDED,
            {"role": Role.USER.value, "refinement": request.to_dict()},
        )

    # -- instructions ------------------------------------------------------------

    @staticmethod
    def _notes(summary: dict[str, Any] | None) -> str:
        if summary and summary.get("summary_text"):
            return "\n\nDocumentation notes:\n" + summary["summary_text"]
        return ""

    @staticmethod
    def _error_instruction(error: ExecutionError | None, summary: dict[str, Any] | None) -> str:
        message = error.message if error else "unknown error"
        tail = "\n".join((error.traceback or "").splitlines()[-10:]) if error else ""
        text = (
            "The last execution failed. Fix the error and return the complete corrected script.\n"
            f"Error: {message}"
        )
        if tail:
            text += f"\nTraceback tail:\n{tail}"
        return text + Orchestrator._notes(summary)

    @staticmethod
    def _critique_instruction(critiques: list[Critique]) -> str:
        lines = "\n".join(
            f"{c.index}. problem: {c.problem} | fix: {c.suggested_fix}" for c in critiques
        )
        return (
            "Address every critique below and return the complete updated script. "
            "Keep everything that is not criticized unchanged.\nCritiques:\n" + lines
        )

    @staticmethod
    def _followup_instruction(followups: list[tuple[int, str]]) -> str:
        lines = "\n".join(f"{idx}. {text}" for idx, text in followups)
        return (
            "Verification found unresolved issues. Apply these follow-up instructions and "
            "return the complete updated script.\nFollow-ups:\n" + lines
        )

    # -- phase runners --------------------------------------------------------------

    def run_auto(self, phases: tuple[int, ...] = (1, 2)) -> SessionState:
        """Planner plus the automatic phases; stops early if the session fails."""
        try:
            plan_event = self.run_plan()
            if 1 in phases:
                self.run_phase1(last_event=plan_event)
            if 2 in phases and self.state.phase is Phase.AUTO_REFINE:
                self.run_phase2()
        except (agents_mod.AgentParseError, GatewayError) as exc:
            if isinstance(exc, (FixtureMismatchError, ReplayDivergenceError)):
                raise
            self._fail(f"{type(exc).__name__}: {exc}")
        return self.state

    def run_phase1(
        self, plan: list[Subtask] | None = None, last_event: Event | None = None
    ) -> SessionState:
        state = self.state
        if state.phase is not Phase.INITIAL_CREATION:
            raise IllegalStateError(f"phase one cannot start from {state.phase.value}")
        if plan is not None and not state.subtasks:
            last_event = self._emit(
                Role.PLANNER.value,
                EventKind.TURN_ENDED,
                {
                    "role": Role.PLANNER.value,
                    "subtasks": [{"index": s.index, "description": s.description} for s in plan],
                    "complete": True,
                },
            )
        if not self.state.subtasks:
            raise IllegalStateError("phase one requires a non-empty plan")
        if last_event is None:
            last_event = self.state.event_log[-1]

        machine = PhaseMachine(phase=Phase.INITIAL_CREATION)
        summary: dict[str, Any] | None = None
        while True:
            decision = select_next(self.state, machine, last_event)

            if decision.next_actor is NextActor.HALT:
                error = machine.pending_error
                self._fail(
                    f"subtask {machine.subtask_index} still failing after "
                    f"{machine.retry_count} failed executions",
                    error,
                )
                return self.state

            if decision.next_actor is NextActor.RENDER_TOOL:
                self._change_phase(Phase.AUTO_REFINE)
                return self.state

            if decision.next_actor is NextActor.RETRIEVAL:
                if decision.reason is Reason.SUBTASK_NEXT and last_event.kind is EventKind.CODE_EXECUTED:
                    machine.subtask_index += 1
                    machine.retry_count = 0
                    machine.pending_error = None
                subtask = self.state.subtasks[machine.subtask_index - 1]
                if decision.reason is Reason.EXEC_ERROR:
                    error = machine.pending_error
                    assert error is not None
                    last_event = self._retrieval_turn(
                        error.message, QueryKind.ERROR_MESSAGE, machine.subtask_index, error=error
                    )
                else:
                    last_event = self._retrieval_turn(
                        subtask.description, QueryKind.TASK_INTENT, machine.subtask_index
                    )
                summary = last_event.payload.get("summary")
                continue

            if decision.next_actor is NextActor.CODING:
                subtask = self.state.subtasks[machine.subtask_index - 1]
                if decision.reason is Reason.EXEC_ERROR:
                    instruction = self._error_instruction(machine.pending_error, summary)
                    purpose = "retry"
                else:
                    instruction = f"Subtask {subtask.index}: {subtask.description}" + self._notes(summary)
                    purpose = "subtask"
                last_event = self._coding_turn(purpose, instruction, subtask_index=subtask.index)
                self._track_execution(machine, last_event)
                continue

            raise IllegalStateError(f"unexpected decision {decision} in phase one")

    def _track_execution(self, machine: PhaseMachine, executed: Event) -> None:
        if executed.payload["ok"]:
            machine.retry_count = 0
            machine.pending_error = None
        else:
            machine.retry_count += 1
            err = executed.payload.get("error")
            machine.pending_error = ExecutionError.from_dict(err) if err else None

    def run_phase2(self) -> SessionState:
        state = self.state
        if state.phase is not Phase.AUTO_REFINE:
            raise IllegalStateError(f"phase two cannot start from {state.phase.value}")
        if state.latest_ok_code is None:
            raise IllegalStateError("phase two requires a successful code artifact")

        machine = PhaseMachine(phase=Phase.AUTO_REFINE)
        last_event = self.state.event_log[-1]
        summary: dict[str, Any] | None = None
        while True:
            decision = select_next(self.state, machine, last_event)

            if decision.next_actor is NextActor.USER_PROXY:  # critic approved
                self._change_phase(Phase.USER_REFINE)
                return self.state

            if decision.next_actor is NextActor.HALT:
                if decision.reason is Reason.VERIFY_PASSED:
                    self._change_phase(Phase.USER_REFINE)
                    return self.state
                if last_event.kind is EventKind.TURN_ENDED:  # verification cap
                    self._warn(
                        Reason.CAP_EXHAUSTED,
                        f"verification cap ({state.config.max_verification_rounds} rounds) "
                        "reached; advancing with unresolved items",
                    )
                    self._change_phase(Phase.USER_REFINE)
                    return self.state
                self._fail(
                    f"execution still failing after {machine.retry_count} failed attempts",
                    machine.pending_error,
                )
                return self.state

            last_event, summary = self._perform_refine_step(machine, decision, summary)

    def _perform_refine_step(
        self,
        machine: PhaseMachine,
        decision: TurnDecision,
        summary: dict[str, Any] | None,
    ) -> tuple[Event, dict[str, Any] | None]:
        """One actor step shared by the auto- and user-refinement loops."""
        if decision.next_actor is NextActor.RENDER_TOOL:
            purpose = (
                "critique"
                if machine.phase is Phase.AUTO_REFINE and machine.critique_round == 0
                else "verification"
            )
            return self._render_step(purpose), summary

        if decision.next_actor is NextActor.CRITIC:
            round_no = machine.critique_round + 1
            event = self._critic_turn(round_no)
            machine.critique_round = round_no
            machine.before_render_id = event.payload["critique_round"]["render_set_id"]
            machine.current_critiques = [
                Critique.from_dict(c) for c in event.payload["critique_round"]["items"]
            ]
            return event, summary

        if decision.next_actor is NextActor.VERIFICATION:
            round_no = machine.verification_round + 1
            before_id = machine.before_render_id
            assert before_id is not None
            event = self._verification_turn(round_no, before_id, machine.current_critiques)
            machine.verification_round = round_no
            machine.before_render_id = event.payload["verification_round"]["render_set_id_after"]
            machine.pending_followups = [
                (item["critique_index"], f"({item['status']}) {item['followup_instruction']}")
                for item in event.payload["verification_round"]["items"]
                if item["status"] != "Resolved"
            ]
            return event, summary

        if decision.next_actor is NextActor.RETRIEVAL:
            error = machine.pending_error
            assert error is not None
            event = self._retrieval_turn(error.message, QueryKind.ERROR_MESSAGE, None, error=error)
            return event, event.payload.get("summary")

        if decision.next_actor is NextActor.CODING:
            if decision.reason is Reason.CRITIQUE_FOUND:
                instruction = self._critique_instruction(machine.current_critiques)
                purpose, round_no = "fix", machine.critique_round
            elif decision.reason is Reason.VERIFY_FAILED:
                instruction = self._followup_instruction(machine.pending_followups)
                purpose, round_no = "followup", machine.verification_round
            elif decision.reason is Reason.USER_INPUT:
                refinement = self.state.refinements[-1]
                instruction = (
                    f"User request: {refinement.text}\n"
                    "Update the current script accordingly and return the complete updated script."
                )
                purpose, round_no = "refine", None
            else:  # EXEC_ERROR
                instruction = self._error_instruction(machine.pending_error, summary)
                purpose, round_no = "retry", None
            event = self._coding_turn(purpose, instruction, round_no=round_no)
            self._track_execution(machine, event)
            return event, summary

        raise IllegalStateError(f"unexpected decision {decision}")

    def run_phase3_step(self, request: RefinementRequest) -> SessionState:
        state = self.state
        if state.phase is not Phase.USER_REFINE:
            raise IllegalStateError(f"refinement requires UserRefine, session is {state.phase.value}")

        last_event = self._user_turn(request)
        machine = PhaseMachine(phase=Phase.USER_REFINE)
        machine.current_critiques = [
            Critique(
                index=1,
                problem=f"The requested change is not applied yet: {request.text}",
                suggested_fix=request.text,
            )
        ]
        latest_render = state.latest_render_set
        machine.before_render_id = latest_render.render_set_id if latest_render else None
        summary: dict[str, Any] | None = None

        try:
            while True:
                decision = select_next(self.state, machine, last_event)

                if decision.next_actor is NextActor.HALT:
                    if decision.reason is Reason.TERMINATOR:
                        self._change_phase(Phase.TERMINATED)
                        self._emit(
                            "user",
                            EventKind.TERMINATED,
                            {"keyword": self.state.config.termination_keyword},
                        )
                        return self.state
                    self._fail(
                        f"execution still failing after {machine.retry_count} failed attempts",
                        machine.pending_error,
                    )
                    return self.state

                if decision.next_actor is NextActor.USER_PROXY:
                    if decision.reason is Reason.CAP_EXHAUSTED:
                        self._warn(
                            Reason.CAP_EXHAUSTED,
                            f"verification cap ({state.config.max_verification_rounds} rounds) "
                            "reached; returning to user input",
                        )
                    return self.state  # awaiting the next request

                if (
                    decision.next_actor is NextActor.RENDER_TOOL
                    and machine.before_render_id is None
                ):
                    # no earlier render exists to diff against; remember the first one
                    last_event = self._render_step("verification")
                    machine.before_render_id = last_event.payload["render_set"]["render_set_id"]
                    continue

                last_event, summary = self._perform_refine_step(machine, decision, summary)
        except (agents_mod.AgentParseError, GatewayError) as exc:
            if isinstance(exc, (FixtureMismatchError, ReplayDivergenceError)):
                raise
            self._fail(f"{type(exc).__name__}: {exc}")
            return self.state


def trace_lines(events: list[Event]) -> list[str]:
    """Human-readable turn trace of a session, used for golden-file comparison."""
    lines: list[str] = []
    for event in events:
        payload = event.payload
        if event.kind is EventKind.TURN_STARTED:
            role = payload.get("role", event.actor)
            if role == Role.RETRIEVAL.value:
                kind = "error" if payload.get("query_kind") == QueryKind.ERROR_MESSAGE else "task"
                lines.append(f"turn retrieval subtask={payload.get('subtask_index')} kind={kind}")
            elif role == Role.CODING.value:
                parts = [f"turn coding purpose={payload.get('purpose')}"]
                if payload.get("subtask_index") is not None:
                    parts.append(f"subtask={payload['subtask_index']}")
                if payload.get("round") is not None:
                    parts.append(f"round={payload['round']}")
                lines.append(" ".join(parts))
            elif role == Role.CRITIC.value:
                lines.append(f"turn critic round={payload.get('round')}")
            elif role == Role.VERIFICATION.value:
                lines.append(f"turn verification round={payload.get('round')}")
            else:
                lines.append(f"turn {role}")
        elif event.kind is EventKind.CODE_EXECUTED:
            status = "ok" if payload["ok"] else f"error={payload['error']['kind']}"
            lines.append(f"exec v{payload['version']} {status}")
        elif event.kind is EventKind.RENDER_PRODUCED:
            rs = payload["render_set"]
            lines.append(f"render {rs['render_set_id']} purpose={payload.get('purpose')}")
        elif event.kind is EventKind.TURN_ENDED:
            role = payload.get("role")
            if role == Role.CRITIC.value:
                cr = payload["critique_round"]
                lines.append(f"critiqued round={cr['round']} items={len(cr['items'])}")
            elif role == Role.VERIFICATION.value:
                vr = payload["verification_round"]
                resolved = sum(1 for i in vr["items"] if i["status"] == "Resolved")
                lines.append(f"verified round={vr['round']} resolved={resolved}/{len(vr['items'])}")
        elif event.kind is EventKind.PHASE_CHANGED:
            if payload.get("from") is not None:
                lines.append(f"phase {payload['to']}")
        elif event.kind is EventKind.ERROR and payload.get("warning"):
            lines.append(f"warning {payload.get('reason')}")
        elif event.kind is EventKind.TERMINATED:
            lines.append("terminated")
    return lines
