"""Event log: append-only discipline, persistence layout, replay determinism."""

from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blendforge.store import (
    SequenceGapError,
    SessionStore,
    StoreError,
    apply_event,
    normalized_log,
    project,
    read_events,
)
from blendforge.types import (
    Event,
    EventKind,
    Phase,
    SessionConfig,
    SessionState,
)

from conftest import FakeClock


def make_store(tmp_path):
    return SessionStore(tmp_path / "sessions", clock=FakeClock())


def test_create_session_writes_layout(tmp_path):
    store = make_store(tmp_path)
    state = store.create_session("a red bucket", SessionConfig(), session_id="s1")
    directory = store.session_dir("s1")
    assert (directory / "events.ndjson").exists()
    assert (directory / "code").is_dir()
    assert (directory / "renders").is_dir()
    assert (directory / "session.json").exists()
    assert state.phase is Phase.INITIAL_CREATION
    assert state.goal == "a red bucket"

    first = json.loads((directory / "events.ndjson").read_text().splitlines()[0])
    assert first["seq"] == 1
    assert first["kind"] == "PhaseChanged"
    assert first["payload"]["goal"] == "a red bucket"


def test_append_assigns_successor_seq(tmp_path):
    store = make_store(tmp_path)
    store.create_session("goal", session_id="s1")
    event = store.append("s1", actor="system", kind=EventKind.ERROR, payload={"message": "x"})
    assert event.seq == 2
    assert [e.seq for e in store.events("s1")] == [1, 2]


def test_append_event_rejects_gap(tmp_path):
    store = make_store(tmp_path)
    store.create_session("goal", session_id="s1")
    bad = Event(seq=9, timestamp=0.0, actor="system", kind=EventKind.ERROR, payload={})
    with pytest.raises(SequenceGapError):
        store.append_event("s1", bad)


def test_append_event_accepts_successor(tmp_path):
    store = make_store(tmp_path)
    store.create_session("goal", session_id="s1")
    ok = Event(seq=2, timestamp=0.0, actor="system", kind=EventKind.ERROR, payload={})
    store.append_event("s1", ok)
    assert len(store.events("s1")) == 2


def test_append_only_earlier_lines_never_rewritten(tmp_path):
    store = make_store(tmp_path)
    store.create_session("goal", session_id="s1")
    path = store.session_dir("s1") / "events.ndjson"
    before = path.read_text()
    store.append("s1", actor="system", kind=EventKind.ERROR, payload={"message": "later"})
    after = path.read_text()
    assert after.startswith(before)


def test_empty_goal_rejected(tmp_path):
    store = make_store(tmp_path)
    with pytest.raises(StoreError):
        store.create_session("")


def test_load_session_folds_from_disk(tmp_path, mini_index, oracle_run):
    store, _ = oracle_run
    fresh = SessionStore(store.base_dir)
    loaded = fresh.load_session("oracle")
    assert loaded.phase is Phase.USER_REFINE
    assert loaded.to_dict() == store.state("oracle").to_dict()


def test_projection_equals_incremental_state(oracle_run):
    store, _ = oracle_run
    state = store.state("oracle")
    replayed = project(read_events(store.session_dir("oracle")), "oracle")
    assert replayed.to_dict() == state.to_dict()


def test_code_files_match_event_sources(oracle_run):
    store, _ = oracle_run
    state = store.state("oracle")
    for artifact in state.code_versions:
        on_disk = store.read_code("oracle", artifact.version).decode("utf-8")
        assert on_disk == artifact.source


def test_versions_strictly_increasing(oracle_run):
    store, _ = oracle_run
    versions = [c.version for c in store.state("oracle").code_versions]
    assert versions == sorted(versions) == list(range(1, len(versions) + 1))


def test_normalized_log_masks_timing(oracle_run):
    store, _ = oracle_run
    for line in normalized_log(store.session_dir("oracle")):
        record = json.loads(line)
        assert record["timestamp"] == 0


# -- replay determinism property -------------------------------------------------

_plan_st = st.lists(st.text(min_size=1, max_size=12), min_size=1, max_size=4)


@st.composite
def legal_event_scripts(draw):
    """Abstract action scripts whose emitted events are always legal."""
    actions = []
    plan = draw(_plan_st)
    actions.append(("plan", plan))
    n_steps = draw(st.integers(min_value=0, max_value=12))
    version = 0
    renders = 0
    for _ in range(n_steps):
        choice = draw(st.sampled_from(["exec_ok", "exec_fail", "render", "warn"]))
        if choice == "exec_ok":
            version += 1
            actions.append(("exec", version, True))
        elif choice == "exec_fail":
            version += 1
            actions.append(("exec", version, False))
        elif choice == "render":
            renders += 1
            actions.append(("render", renders))
        else:
            actions.append(("warn",))
    return actions


def _emit_script(store: SessionStore, session_id: str, actions) -> None:
    for action in actions:
        if action[0] == "plan":
            store.append(
                session_id,
                actor="planner",
                kind=EventKind.TURN_ENDED,
                payload={
                    "role": "planner",
                    "subtasks": [
                        {"index": i, "description": d} for i, d in enumerate(action[1], start=1)
                    ],
                    "complete": True,
                },
            )
        elif action[0] == "exec":
            _, version, ok = action
            store.append(
                session_id,
                actor="coding",
                kind=EventKind.CODE_EXECUTED,
                payload={
                    "version": version,
                    "source": f"print({version})",
                    "ok": ok,
                    "stdout": "",
                    "stderr": "",
                    "error": None
                    if ok
                    else {"kind": "ScriptException", "message": "boom", "traceback": "tb"},
                    "wall_time_ms": 1.0,
                    "produced_by_phase": "InitialCreation",
                    "provoking_input": {"kind": "subtask", "index": 1},
                },
            )
        elif action[0] == "render":
            store.append(
                session_id,
                actor="system",
                kind=EventKind.RENDER_PRODUCED,
                payload={
                    "render_set": {
                        "render_set_id": f"rs{action[1]}",
                        "view_count": 1,
                        "views": [
                            {
                                "image_path": f"renders/rs{action[1]}/view1.png",
                                "azimuth_deg": 45.0,
                                "elevation_deg": 30.0,
                                "camera_distance": 5.0,
                            }
                        ],
                        "bbox": [[0, 0, 0], [1, 1, 1]],
                    },
                    "purpose": "critique",
                },
            )
        else:
            store.append(
                session_id,
                actor="system",
                kind=EventKind.ERROR,
                payload={"warning": True, "reason": "CapExhausted", "message": "w"},
            )


@given(legal_event_scripts())
@settings(max_examples=40, deadline=None)
def test_replay_determinism_random_sequences(tmp_path_factory, actions):
    base = tmp_path_factory.mktemp("replay")
    store = SessionStore(base, clock=FakeClock())
    store.create_session("goal", session_id="s")
    _emit_script(store, "s", actions)
    incremental = store.state("s").to_dict()
    refolded = project(read_events(store.session_dir("s")), "s").to_dict()
    assert refolded == incremental


def test_apply_event_marks_subtask_done():
    state = SessionState(session_id="x", goal="g")
    apply_event(
        state,
        Event(
            seq=1,
            timestamp=0,
            actor="planner",
            kind=EventKind.TURN_ENDED,
            payload={
                "role": "planner",
                "subtasks": [{"index": 1, "description": "legs"}],
                "complete": True,
            },
        ),
    )
    apply_event(
        state,
        Event(
            seq=2,
            timestamp=0,
            actor="coding",
            kind=EventKind.CODE_EXECUTED,
            payload={
                "version": 1,
                "source": "x=1",
                "ok": True,
                "stdout": "",
                "stderr": "",
                "error": None,
                "wall_time_ms": 1.0,
                "produced_by_phase": "InitialCreation",
                "provoking_input": {"kind": "subtask", "index": 1},
            },
        ),
    )
    assert state.subtasks[0].status.value == "Done"
    assert state.latest_code.version == 1


def test_wait_for_events_wakes_on_append(tmp_path):
    import threading
    import time

    store = make_store(tmp_path)
    store.create_session("goal", session_id="s")

    received = []

    def waiter():
        received.extend(store.wait_for_events("s", after_seq=1, timeout=5.0))

    thread = threading.Thread(target=waiter)
    thread.start()
    time.sleep(0.1)
    store.append("s", actor="system", kind=EventKind.ERROR, payload={"message": "ping"})
    thread.join(timeout=5)
    assert not thread.is_alive()
    assert [e.seq for e in received] == [2]


def test_wait_for_events_times_out_empty(tmp_path):
    store = make_store(tmp_path)
    store.create_session("goal", session_id="s")
    assert store.wait_for_events("s", after_seq=1, timeout=0.1) == []
