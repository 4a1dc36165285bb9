"""Turn routing: scripted phase traces, caps, determinism, the reference automaton."""

from __future__ import annotations

import pytest

from blendforge.gateway import ScriptedBackend, TranscriptEntry
from blendforge.orchestrator import (
    IllegalStateError,
    NextActor,
    Orchestrator,
    PhaseMachine,
    Reason,
    TurnDecision,
    select_next,
    trace_lines,
)
from blendforge.store import SessionStore
from blendforge.types import (
    Event,
    EventKind,
    Phase,
    RefinementRequest,
    SessionConfig,
)

from conftest import (
    CHAIR_V1,
    FakeClock,
    LocalExecutor,
    oracle_transcript,
    run_oracle_session,
    text_reply,
    tool_reply,
)
from workflow_automaton import accepts

OK_SCRIPT = "SCENE_BBOX = [[-1.0, -1.0, 0.0], [1.0, 1.0, 1.0]]\nprint('ok')\n"
FAILING_SCRIPT = "raise RuntimeError('deliberate failure')\n"


def _session(tmp_path, transcript, config=None, goal="create a wooden chair", index=None):
    store = SessionStore(tmp_path / "s", clock=FakeClock())
    store.create_session(goal, config or SessionConfig(), session_id="t")
    orch = Orchestrator(store, "t", ScriptedBackend(transcript), LocalExecutor(), rag_index=index)
    return store, orch


def _counts(events, kind: EventKind, role: str | None = None) -> int:
    n = 0
    for e in events:
        if e.kind is kind and (role is None or e.payload.get("role") == role):
            n += 1
    return n


# -- selector unit behavior ------------------------------------------------------


def _event(kind: EventKind, payload: dict) -> Event:
    return Event(seq=1, timestamp=0.0, actor="x", kind=kind, payload=payload)


def _phase1_state():
    from blendforge.types import SessionState, Subtask

    return SessionState(
        session_id="s",
        goal="g",
        subtasks=[Subtask(1, "legs"), Subtask(2, "seat")],
    )


def test_select_exec_error_routes_to_retrieval():
    state = _phase1_state()
    machine = PhaseMachine(phase=Phase.INITIAL_CREATION, retry_count=1)
    decision = select_next(state, machine, _event(EventKind.CODE_EXECUTED, {"ok": False}))
    assert decision == TurnDecision(NextActor.RETRIEVAL, Reason.EXEC_ERROR)


def test_select_exec_ok_routes_to_next_subtask():
    state = _phase1_state()
    machine = PhaseMachine(phase=Phase.INITIAL_CREATION, subtask_index=1)
    decision = select_next(state, machine, _event(EventKind.CODE_EXECUTED, {"ok": True}))
    assert decision == TurnDecision(NextActor.RETRIEVAL, Reason.SUBTASK_NEXT)


def test_select_verify_passed_halts_phase_two():
    state = _phase1_state()
    state.phase = Phase.AUTO_REFINE
    machine = PhaseMachine(phase=Phase.AUTO_REFINE, verification_round=1)
    decision = select_next(
        state,
        machine,
        _event(
            EventKind.TURN_ENDED,
            {"role": "verification", "verification_round": {"all_resolved": True, "items": []}},
        ),
    )
    assert decision == TurnDecision(NextActor.HALT, Reason.VERIFY_PASSED)


def test_select_is_deterministic():
    state = _phase1_state()
    machine = PhaseMachine(phase=Phase.INITIAL_CREATION)
    event = _event(EventKind.CODE_EXECUTED, {"ok": True})
    first = select_next(state, machine, event)
    for _ in range(5):
        assert select_next(state, machine, event) == first


def test_select_rejects_impossible_event():
    state = _phase1_state()
    machine = PhaseMachine(phase=Phase.INITIAL_CREATION)
    with pytest.raises(IllegalStateError):
        select_next(
            state,
            machine,
            _event(EventKind.TURN_ENDED, {"role": "critic", "critique_round": {"approved": True}}),
        )


def test_halt_reason_invariant():
    with pytest.raises(IllegalStateError):
        TurnDecision(NextActor.HALT, Reason.CRITIQUE_CLEAN)


# -- phase one -----------------------------------------------------------------


def clean_phase1_transcript() -> list[TranscriptEntry]:
    return [
        TranscriptEntry(
            "planner",
            text_reply("coding_agent: legs\ncoding_agent: backrest\ncoding_agent: seat\nCOMPLETE"),
        ),
        TranscriptEntry("retrieval", text_reply("notes 1")),
        TranscriptEntry("retrieval", text_reply("notes 2")),
        TranscriptEntry("retrieval", text_reply("notes 3")),
        TranscriptEntry("coding", tool_reply(OK_SCRIPT)),
        TranscriptEntry("coding", tool_reply(OK_SCRIPT + "# 2\n")),
        TranscriptEntry("coding", tool_reply(OK_SCRIPT + "# 3\n")),
    ]


def test_phase1_clean_run_turn_counts(tmp_path, mini_index):
    store, orch = _session(tmp_path, clean_phase1_transcript(), index=mini_index)
    plan_event = orch.run_plan()
    orch.run_phase1(last_event=plan_event)
    events = store.events("t")
    assert _counts(events, EventKind.TURN_STARTED, "retrieval") == 3
    assert _counts(events, EventKind.TURN_STARTED, "coding") == 3
    assert _counts(events, EventKind.CODE_EXECUTED) == 3
    assert store.state("t").phase is Phase.AUTO_REFINE
    assert all(s.status.value == "Done" for s in store.state("t").subtasks)


def test_phase1_single_error_inserts_retry_cycle(tmp_path, mini_index, oracle_run):
    store, _ = oracle_run
    events = store.events("oracle")
    phase1 = [e for e in events if e.payload.get("produced_by_phase") == "InitialCreation"]
    assert len(phase1) == 4  # three subtasks plus one retry execution
    trace = trace_lines(events)
    i = trace.index("exec v2 error=ScriptException")
    assert trace[i + 1] == "turn retrieval subtask=2 kind=error"
    assert trace[i + 2] == "turn coding purpose=retry subtask=2"
    assert trace[i + 3] == "exec v3 ok"


def always_failing_transcript(retries: int) -> list[TranscriptEntry]:
    entries = [
        TranscriptEntry("planner", text_reply("coding_agent: build the thing\nCOMPLETE")),
        TranscriptEntry("retrieval", text_reply("task notes")),
    ]
    for i in range(retries - 1):
        entries.append(TranscriptEntry("retrieval", text_reply(f"error notes {i + 1}")))
    for i in range(retries):
        entries.append(TranscriptEntry("coding", tool_reply(FAILING_SCRIPT + f"# attempt {i + 1}\n")))
    return entries


def test_phase1_cap_fails_after_exactly_five_retries(tmp_path, mini_index):
    config = SessionConfig(max_exec_retries=5)
    store, orch = _session(tmp_path, always_failing_transcript(5), config=config, index=mini_index)
    orch.run_auto()
    state = store.state("t")
    events = store.events("t")
    assert state.phase is Phase.FAILED
    failed_execs = [
        e for e in events if e.kind is EventKind.CODE_EXECUTED and not e.payload["ok"]
    ]
    assert len(failed_execs) == 5
    # model turns: one planner, five retrieval, five coding
    assert _counts(events, EventKind.TURN_STARTED, "planner") == 1
    assert _counts(events, EventKind.TURN_STARTED, "retrieval") == 5
    assert _counts(events, EventKind.TURN_STARTED, "coding") == 5
    assert _counts(events, EventKind.TURN_STARTED) == 11
    error_events = [e for e in events if e.kind is EventKind.ERROR and not e.payload.get("warning")]
    assert error_events and error_events[-1].payload["last_error"]["kind"] == "ScriptException"


def test_phase1_boundedness(tmp_path, mini_index):
    config = SessionConfig(max_exec_retries=5)
    store, orch = _session(tmp_path, always_failing_transcript(5), config=config, index=mini_index)
    orch.run_auto()
    n = len(store.state("t").subtasks)
    turns = _counts(store.events("t"), EventKind.TURN_STARTED)
    assert turns <= n * (1 + 2 * store.state("t").config.max_exec_retries)


# -- phase two ------------------------------------------------------------------


def clean_critic_transcript() -> list[TranscriptEntry]:
    return [
        TranscriptEntry("planner", text_reply("coding_agent: the whole thing\nCOMPLETE")),
        TranscriptEntry("retrieval", text_reply("notes")),
        TranscriptEntry("coding", tool_reply(OK_SCRIPT)),
        TranscriptEntry("critic", text_reply("NO ISSUES")),
    ]


def test_phase2_clean_critic_advances_immediately(tmp_path, mini_index):
    store, orch = _session(tmp_path, clean_critic_transcript(), index=mini_index)
    orch.run_auto()
    events = store.events("t")
    assert store.state("t").phase is Phase.USER_REFINE
    assert _counts(events, EventKind.RENDER_PRODUCED) == 1
    assert _counts(events, EventKind.TURN_STARTED, "critic") == 1
    assert _counts(events, EventKind.TURN_STARTED, "verification") == 0
    assert store.state("t").critiques[-1].approved


def stubborn_verifier_transcript(rounds: int) -> list[TranscriptEntry]:
    entries = [
        TranscriptEntry("planner", text_reply("coding_agent: the whole thing\nCOMPLETE")),
        TranscriptEntry("retrieval", text_reply("notes")),
        TranscriptEntry("coding", tool_reply(OK_SCRIPT)),
        TranscriptEntry(
            "critic", text_reply("1. problem: part is floating | fix: attach the part")
        ),
        TranscriptEntry("coding", tool_reply(OK_SCRIPT + "# fix\n")),
    ]
    for i in range(rounds):
        entries.append(
            TranscriptEntry("verification", text_reply("1. UNRESOLVED: still floating"))
        )
        if i < rounds - 1:
            entries.append(TranscriptEntry("coding", tool_reply(OK_SCRIPT + f"# followup {i}\n")))
    return entries


def test_phase2_verification_cap_advances_with_warning(tmp_path, mini_index):
    config = SessionConfig(max_verification_rounds=3)
    store, orch = _session(tmp_path, stubborn_verifier_transcript(3), config=config, index=mini_index)
    orch.run_auto()
    events = store.events("t")
    state = store.state("t")
    assert state.phase is Phase.USER_REFINE
    assert _counts(events, EventKind.TURN_STARTED, "verification") == 3
    warnings = [e for e in events if e.kind is EventKind.ERROR and e.payload.get("warning")]
    assert any("verification cap" in w.payload["message"] for w in warnings)


def test_phase2_partial_then_resolved_two_coding_turns(oracle_run):
    store, _ = oracle_run
    events = store.events("oracle")
    phase2_coding = [
        e
        for e in events
        if e.kind is EventKind.TURN_STARTED
        and e.payload.get("role") == "coding"
        and e.payload.get("purpose") in ("fix", "followup")
    ]
    assert len(phase2_coding) == 2
    assert len(store.state("oracle").verifications) == 2


def failing_fix_transcript() -> list[TranscriptEntry]:
    entries = [
        TranscriptEntry("planner", text_reply("coding_agent: the whole thing\nCOMPLETE")),
        TranscriptEntry("retrieval", text_reply("notes")),
        TranscriptEntry("coding", tool_reply(OK_SCRIPT)),
        TranscriptEntry("critic", text_reply("1. problem: broken | fix: fix it")),
    ]
    for i in range(2):
        entries.append(TranscriptEntry("coding", tool_reply(FAILING_SCRIPT + f"# {i}\n")))
        entries.append(TranscriptEntry("retrieval", text_reply(f"error notes {i}")))
    return entries


def test_phase2_exec_retry_exhaustion_fails(tmp_path, mini_index):
    config = SessionConfig(max_exec_retries=2)
    store, orch = _session(tmp_path, failing_fix_transcript(), config=config, index=mini_index)
    orch.run_auto()
    assert store.state("t").phase is Phase.FAILED


# -- phase three -----------------------------------------------------------------


def refine_transcript(verdicts: list[str]) -> list[TranscriptEntry]:
    entries = oracle_transcript()
    entries.append(
        TranscriptEntry("coding", tool_reply(CHAIR_V1 + "# armrests\n"), require=["armrests"])
    )
    for i, verdict in enumerate(verdicts):
        entries.append(TranscriptEntry("verification", text_reply(verdict), require=["armrests"]))
        if i < len(verdicts) - 1 and not verdict.startswith("1. RESOLVED"):
            entries.append(
                TranscriptEntry("coding", tool_reply(CHAIR_V1 + f"# armrests fix {i}\n"))
            )
    return entries


def _refined_session(tmp_path, mini_index, verdicts):
    store = SessionStore(tmp_path / "s", clock=FakeClock())
    store.create_session("create a wooden chair", SessionConfig(), session_id="t")
    orch = Orchestrator(
        store, "t", ScriptedBackend(refine_transcript(verdicts)), LocalExecutor(), rag_index=mini_index
    )
    orch.run_auto()
    assert store.state("t").phase is Phase.USER_REFINE
    return store, orch


def test_phase3_terminator_ends_without_model_calls(tmp_path, mini_index):
    store, orch = _refined_session(tmp_path, mini_index, ["1. RESOLVED"])
    before = _counts(store.events("t"), EventKind.MODEL_CALL)
    orch.run_phase3_step(RefinementRequest(text="COMPLETE", submitted_at=0.0, terminator=True))
    state = store.state("t")
    assert state.phase is Phase.TERMINATED
    assert _counts(store.events("t"), EventKind.MODEL_CALL) == before
    assert store.events("t")[-1].kind is EventKind.TERMINATED


def test_phase3_simple_edit_resolves_and_returns_to_idle(tmp_path, mini_index):
    store, orch = _refined_session(tmp_path, mini_index, ["1. RESOLVED"])
    versions_before = len(store.state("t").code_versions)
    orch.run_phase3_step(RefinementRequest(text="add armrests to the chair", submitted_at=0.0))
    state = store.state("t")
    assert state.phase is Phase.USER_REFINE
    assert len(state.code_versions) == versions_before + 1
    assert state.verifications[-1].all_resolved
    assert state.refinements[-1].text == "add armrests to the chair"


def test_phase3_unresolved_triggers_second_coding_turn(tmp_path, mini_index):
    store, orch = _refined_session(
        tmp_path,
        mini_index,
        ["1. PARTIAL: rotate the armrests", "1. RESOLVED"],
    )
    versions_before = len(store.state("t").code_versions)
    orch.run_phase3_step(RefinementRequest(text="add armrests to the chair", submitted_at=0.0))
    state = store.state("t")
    assert state.phase is Phase.USER_REFINE
    assert len(state.code_versions) == versions_before + 2
    assert [v.round for v in state.verifications[-2:]] == [1, 2]


def test_phase3_requires_user_refine_phase(tmp_path, mini_index):
    store, orch = _session(tmp_path, clean_phase1_transcript(), index=mini_index)
    with pytest.raises(IllegalStateError):
        orch.run_phase3_step(RefinementRequest(text="anything", submitted_at=0.0))


# -- automaton + determinism ------------------------------------------------------


def test_oracle_trace_accepted_by_reference_automaton(oracle_run):
    store, _ = oracle_run
    assert accepts(trace_lines(store.events("oracle")))


def test_variant_traces_accepted(tmp_path, mini_index):
    scenarios = {
        "clean": clean_critic_transcript(),
        "cap": stubborn_verifier_transcript(3),
        "fail": always_failing_transcript(5),
    }
    for name, transcript in scenarios.items():
        store, orch = _session(
            tmp_path / name, transcript, config=SessionConfig(max_exec_retries=5), index=mini_index
        )
        orch.run_auto()
        assert accepts(trace_lines(store.events("t"))), name


def test_phase3_trace_accepted(tmp_path, mini_index):
    store, orch = _refined_session(tmp_path, mini_index, ["1. PARTIAL: rotate", "1. RESOLVED"])
    orch.run_phase3_step(RefinementRequest(text="add armrests to the chair", submitted_at=0.0))
    orch.run_phase3_step(RefinementRequest(text="COMPLETE", submitted_at=0.0, terminator=True))
    assert accepts(trace_lines(store.events("t")))


def test_two_runs_identical_traces(tmp_path, mini_index):
    store_a, _ = run_oracle_session(tmp_path / "a", mini_index, clock=FakeClock())
    store_b, _ = run_oracle_session(tmp_path / "b", mini_index, clock=FakeClock())
    assert trace_lines(store_a.events("oracle")) == trace_lines(store_b.events("oracle"))


def test_select_rejects_impossible_events_in_refine_phases():
    state = _phase1_state()
    state.phase = Phase.AUTO_REFINE
    machine = PhaseMachine(phase=Phase.AUTO_REFINE)
    with pytest.raises(IllegalStateError):
        select_next(state, machine, _event(EventKind.TURN_ENDED, {"role": "planner", "subtasks": []}))

    state.phase = Phase.USER_REFINE
    machine = PhaseMachine(phase=Phase.USER_REFINE)
    with pytest.raises(IllegalStateError):
        select_next(
            state, machine, _event(EventKind.TURN_ENDED, {"role": "critic", "critique_round": {"approved": False}})
        )


def test_select_rejects_terminal_session():
    state = _phase1_state()
    state.phase = Phase.FAILED
    with pytest.raises(IllegalStateError):
        select_next(state, PhaseMachine(phase=Phase.INITIAL_CREATION), _event(EventKind.CODE_EXECUTED, {"ok": True}))


def test_missing_rag_index_warns_and_continues(tmp_path):
    """No documentation index: retrieval turns still happen, without model calls."""
    transcript = [
        TranscriptEntry("planner", text_reply("coding_agent: the whole thing\nCOMPLETE")),
        TranscriptEntry("coding", tool_reply(OK_SCRIPT)),
        TranscriptEntry("critic", text_reply("NO ISSUES")),
    ]
    store, orch = _session(tmp_path, transcript, index=None)
    orch.run_auto()
    events = store.events("t")
    assert store.state("t").phase is Phase.USER_REFINE
    assert _counts(events, EventKind.TURN_STARTED, "retrieval") == 1
    retrieval_calls = [
        e for e in events
        if e.kind is EventKind.MODEL_CALL and e.payload["role"] == "retrieval"
    ]
    assert retrieval_calls == []
    warnings = [e for e in events if e.kind is EventKind.ERROR and e.payload.get("warning")]
    assert any("retrieval unavailable" in w.payload["message"] for w in warnings)
