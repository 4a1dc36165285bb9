"""Gateway backends: scripted matching, recording, replay, divergence."""

from __future__ import annotations

import json

import pytest

from blendforge.gateway import (
    ChatMessage,
    ChatRequest,
    ChatResponse,
    FixtureMismatchError,
    Gateway,
    GatewayError,
    ReplayBackend,
    ReplayDivergenceError,
    ScriptedBackend,
    TranscriptEntry,
    load_transcript,
    normalize_record,
    request_record,
)
from blendforge.store import normalized_log

from conftest import FakeClock, run_oracle_session, text_reply


def req(role="coding", text="hello bmesh world", attachments=None):
    return ChatRequest(
        agent_role=role,
        messages=[
            ChatMessage("system", "system prompt"),
            ChatMessage("user", text, attachments=attachments or []),
        ],
    )


def test_request_must_start_with_system():
    with pytest.raises(GatewayError):
        ChatRequest(agent_role="coding", messages=[ChatMessage("user", "hi")])


def test_attachments_only_on_user_messages():
    with pytest.raises(GatewayError):
        ChatRequest(
            agent_role="coding",
            messages=[ChatMessage("system", "s", attachments=["x.png"])],
        )


def test_response_requires_content():
    with pytest.raises(GatewayError):
        ChatResponse()


def test_scripted_match_with_required_substring():
    backend = ScriptedBackend([TranscriptEntry("coding", text_reply("yes"), require=["bmesh"])])
    assert backend.complete(req()).text == "yes"


def test_scripted_mismatch_raises():
    backend = ScriptedBackend([TranscriptEntry("coding", text_reply("yes"), require=["bmesh"])])
    with pytest.raises(FixtureMismatchError):
        backend.complete(req(text="no such term"))


def test_scripted_entries_consumed_in_order_per_role():
    backend = ScriptedBackend(
        [
            TranscriptEntry("coding", text_reply("first")),
            TranscriptEntry("coding", text_reply("second")),
            TranscriptEntry("critic", text_reply("other role")),
        ]
    )
    assert backend.complete(req()).text == "first"
    assert backend.complete(req(role="critic")).text == "other role"
    assert backend.complete(req()).text == "second"


def test_scripted_exhaustion_raises():
    backend = ScriptedBackend([])
    with pytest.raises(FixtureMismatchError):
        backend.complete(req())


def test_gateway_records_through_sink(tmp_path):
    records = []
    gateway = Gateway(
        ScriptedBackend([TranscriptEntry("coding", text_reply("ok"))]),
        sink=records.append,
        base_dir=tmp_path,
    )
    gateway.complete(req())
    assert len(records) == 1
    assert records[0]["role"] == "coding"
    assert records[0]["response"]["text"] == "ok"
    assert records[0]["request"]["messages"][1]["text"] == "hello bmesh world"


def test_attachments_recorded_by_path_and_hash_never_inlined(tmp_path):
    image = tmp_path / "view1.png"
    image.write_bytes(b"\x89PNG fake")
    records = []
    gateway = Gateway(
        ScriptedBackend([TranscriptEntry("critic", text_reply("fine"))]),
        sink=records.append,
        base_dir=tmp_path,
    )
    gateway.complete(req(role="critic", attachments=["view1.png"]))
    attachment = records[0]["request"]["messages"][1]["attachments"][0]
    assert attachment["path"] == "view1.png"
    assert len(attachment["sha256"]) == 64
    assert "PNG" not in json.dumps(records[0])  # bytes never inline


def test_transcript_fixture_loader(tmp_path):
    path = tmp_path / "t.json"
    path.write_text(
        json.dumps(
            [
                {"role": "planner", "require": ["chair"], "response": {"text": "coding_agent: x"}},
                {
                    "role": "coding",
                    "response": {
                        "tool_calls": [
                            {"name": "execute_code_tool", "arguments": {"code": "x = 1"}}
                        ]
                    },
                },
            ]
        )
    )
    entries = load_transcript(path)
    assert entries[0].role == "planner" and entries[0].require == ["chair"]
    assert entries[1].response.tool_calls[0].arguments["code"] == "x = 1"


# -- record -> replay ---------------------------------------------------------------


def test_self_replay_reproduces_normalized_log(tmp_path, mini_index):
    store_a, _ = run_oracle_session(tmp_path / "a", mini_index, clock=FakeClock())
    source_dir = store_a.session_dir("oracle")

    from blendforge.orchestrator import Orchestrator
    from blendforge.store import SessionStore
    from blendforge.types import SessionConfig
    from conftest import LocalExecutor

    store_b = SessionStore(tmp_path / "b", clock=FakeClock())
    store_b.create_session("create a wooden chair", SessionConfig(), session_id="oracle")
    replay_backend = ReplayBackend.from_session_dir(
        source_dir, base_dir=store_b.session_dir("oracle")
    )
    orch = Orchestrator(store_b, "oracle", replay_backend, LocalExecutor(), rag_index=mini_index)
    orch.run_auto()
    assert replay_backend.exhausted
    assert normalized_log(source_dir) == normalized_log(store_b.session_dir("oracle"))


def test_replay_divergence_on_changed_request(tmp_path, mini_index):
    store_a, _ = run_oracle_session(tmp_path / "a", mini_index, clock=FakeClock())
    source_dir = store_a.session_dir("oracle")

    from blendforge.orchestrator import Orchestrator
    from blendforge.store import SessionStore
    from blendforge.types import SessionConfig
    from conftest import LocalExecutor

    store_b = SessionStore(tmp_path / "b", clock=FakeClock())
    # a different goal changes the first planner request
    store_b.create_session("create a stone tower", SessionConfig(), session_id="oracle")
    backend = ReplayBackend.from_session_dir(source_dir, base_dir=store_b.session_dir("oracle"))
    orch = Orchestrator(store_b, "oracle", backend, LocalExecutor(), rag_index=mini_index)
    with pytest.raises(ReplayDivergenceError) as excinfo:
        orch.run_plan()
    assert excinfo.value.turn == 1


def test_replay_with_no_recorded_calls_diverges_at_turn_one():
    backend = ReplayBackend([])
    with pytest.raises(ReplayDivergenceError) as excinfo:
        backend.complete(req())
    assert excinfo.value.turn == 1


def test_normalize_record_collapses_whitespace(tmp_path):
    record_a = request_record(req(text="a   b\n\nc"), tmp_path)
    record_b = request_record(req(text="a b c"), tmp_path)
    assert normalize_record(record_a) == normalize_record(record_b)


def test_live_backend_parses_openai_shape():
    from blendforge.gateway import LiveBackend

    body = {
        "choices": [
            {
                "message": {
                    "content": None,
                    "tool_calls": [
                        {
                            "function": {
                                "name": "execute_code_tool",
                                "arguments": "{\"code\": \"x = 1\"}",
                            }
                        }
                    ],
                }
            }
        ],
        "usage": {"prompt_tokens": 12, "completion_tokens": 3, "total_tokens": 15},
    }
    response = LiveBackend._parse(body, latency_ms=42.0)
    assert response.tool_calls[0].name == "execute_code_tool"
    assert response.tool_calls[0].arguments == {"code": "x = 1"}
    assert response.usage["total_tokens"] == 15


def test_live_backend_tolerates_unparseable_tool_arguments():
    from blendforge.gateway import LiveBackend

    body = {
        "choices": [
            {
                "message": {
                    "content": "fine",
                    "tool_calls": [{"function": {"name": "t", "arguments": "{broken"}}],
                }
            }
        ]
    }
    response = LiveBackend._parse(body, latency_ms=1.0)
    assert response.tool_calls[0].arguments == {"raw": "{broken"}
