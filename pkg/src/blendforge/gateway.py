"""Uniform chat-completion interface over live providers and deterministic backends.

Three backends share one ``complete`` contract:

* ``ScriptedBackend`` replays a hand-written transcript, matched per role in
  strict order, with optional required substrings that make fixture drift a
  hard failure instead of a silent mismatch.
* ``LiveBackend`` POSTs to an OpenAI-style chat endpoint with bounded retries.
* ``ReplayBackend`` replays the ModelCall records of a previous session and
  reports the first request that diverges from what was recorded.

Every call that goes through a ``Gateway`` is recorded into the session event
log as a ModelCall with attachments referenced by path (never inlined) plus a
content hash so replays can compare images without byte-level PNG quirks.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable



class GatewayError(Exception):
    pass


class FixtureMismatchError(GatewayError):
    """A scripted entry's expectations did not match the incoming request."""


class ReplayDivergenceError(GatewayError):
    def __init__(self, turn: int, role: str, detail: str):
        super().__init__(f"replay diverged at model turn {turn} (role {role}): {detail}")
        self.turn = turn
        self.role = role


@dataclass
class ChatMessage:
    role: str  # "system" | "user" | "assistant" | "tool"
    text: str
    attachments: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"role": self.role, "text": self.text, "attachments": list(self.attachments)}


@dataclass
class ChatRequest:
    agent_role: str
    messages: list[ChatMessage]
    tools: list[dict[str, Any]] = field(default_factory=list)
    model: str = ""
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if not self.messages or self.messages[0].role != "system":
            raise GatewayError("first message must be a system message")
        for message in self.messages:
            if message.attachments and message.role != "user":
                raise GatewayError("attachments are only allowed on user messages")

    def text(self) -> str:
        return "\n".join(m.text for m in self.messages)


@dataclass
class ToolCall:
    name: str
    arguments: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "arguments": self.arguments}


@dataclass
class ChatResponse:
    text: str | None = None
    tool_calls: list[ToolCall] = field(default_factory=list)
    usage: dict[str, int] = field(default_factory=dict)
    latency_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.text is None and not self.tool_calls:
            raise GatewayError("a response must carry text or tool calls")

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "tool_calls": [t.to_dict() for t in self.tool_calls],
            "usage": dict(self.usage),
            "latency_ms": self.latency_ms,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ChatResponse":
        return cls(
            text=d.get("text"),
            tool_calls=[ToolCall(t["name"], t.get("arguments", {})) for t in d.get("tool_calls", [])],
            usage=d.get("usage", {}),
            latency_ms=d.get("latency_ms", 0.0),
        )


@dataclass
class TranscriptEntry:
    role: str
    response: ChatResponse
    require: list[str] = field(default_factory=list)


def load_transcript(path: str | Path) -> list[TranscriptEntry]:
    """Read a scripted transcript fixture (a JSON list of entries)."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    entries = []
    for item in raw:
        entries.append(
            TranscriptEntry(
                role=item["role"],
                response=ChatResponse.from_dict(item["response"]),
                require=item.get("require", []),
            )
        )
    return entries


class ScriptedBackend:
    """Deterministic backend: entries are consumed strictly in order per role."""

    def __init__(self, entries: list[TranscriptEntry]):
        self._queues: dict[str, list[TranscriptEntry]] = {}
        for entry in entries:
            self._queues.setdefault(entry.role, []).append(entry)
        self._cursors: dict[str, int] = {role: 0 for role in self._queues}

    def skip(self, role: str, count: int) -> None:
        """Advance a role's cursor past already-consumed entries (session resume)."""
        self._cursors[role] = self._cursors.get(role, 0) + count

    def complete(self, request: ChatRequest) -> ChatResponse:
        queue = self._queues.get(request.agent_role, [])
        cursor = self._cursors.get(request.agent_role, 0)
        if cursor >= len(queue):
            raise FixtureMismatchError(
                f"transcript exhausted for role {request.agent_role!r} (call #{cursor + 1})"
            )
        entry = queue[cursor]
        text = request.text()
        missing = [s for s in entry.require if s not in text]
        if missing:
            raise FixtureMismatchError(
                f"role {request.agent_role!r} call #{cursor + 1} is missing required "
                f"substrings {missing!r} in the request"
            )
        self._cursors[request.agent_role] = cursor + 1
        return entry.response


@dataclass
class ProviderBinding:
    provider: str
    model: str
    endpoint: str
    api_key_env: str


class LiveBackend:
    """OpenAI-style chat-completions client with bounded retries.

    Credentials come only from the environment variable named in the binding.
    """

    RETRIES = 2

    def __init__(self, bindings: dict[str, ProviderBinding], timeout_s: float = 120.0):
        self.bindings = bindings
        self.timeout_s = timeout_s

    def complete(self, request: ChatRequest) -> ChatResponse:
        import requests

        binding = self.bindings.get(request.agent_role) or self.bindings.get("default")
        if binding is None:
            raise GatewayError(f"no provider binding for role {request.agent_role!r}")
        api_key = os.environ.get(binding.api_key_env, "")
        payload = {
            "model": binding.model or request.model,
            "temperature": request.temperature,
            "messages": [self._wire_message(m) for m in request.messages],
        }
        if request.tools:
            payload["tools"] = [
                {"type": "function", "function": t} for t in request.tools
            ]
        last_error: Exception | None = None
        for attempt in range(self.RETRIES + 1):
            try:
                started = time.monotonic()
                resp = requests.post(
                    binding.endpoint,
                    json=payload,
                    headers={"Authorization": f"Bearer {api_key}"},
                    timeout=self.timeout_s,
                )
                if resp.status_code >= 500:
                    raise GatewayError(f"provider returned {resp.status_code}")
                if resp.status_code >= 400:
                    raise GatewayError(f"provider rejected request: {resp.status_code} {resp.text[:200]}")
                return self._parse(resp.json(), (time.monotonic() - started) * 1000)
            except GatewayError as exc:
                last_error = exc
                if "rejected" in str(exc):
                    raise
            except Exception as exc:  # connection errors, timeouts
                last_error = exc
            if attempt < self.RETRIES:
                time.sleep(0.5 * 2**attempt)
        raise GatewayError(f"provider call failed after {self.RETRIES + 1} attempts: {last_error}")

    @staticmethod
    def _wire_message(message: ChatMessage) -> dict[str, Any]:
        if not message.attachments:
            return {"role": message.role, "content": message.text}
        import base64

        content: list[dict[str, Any]] = [{"type": "text", "text": message.text}]
        for path in message.attachments:
            data = base64.b64encode(Path(path).read_bytes()).decode("ascii")
            content.append(
                {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{data}"}}
            )
        return {"role": message.role, "content": content}

    @staticmethod
    def _parse(body: dict[str, Any], latency_ms: float) -> ChatResponse:
        choice = body["choices"][0]["message"]
        tool_calls = []
        for call in choice.get("tool_calls") or []:
            fn = call.get("function", {})
            try:
                arguments = json.loads(fn.get("arguments", "{}"))
            except json.JSONDecodeError:
                arguments = {"raw": fn.get("arguments", "")}
            tool_calls.append(ToolCall(name=fn.get("name", ""), arguments=arguments))
        usage = body.get("usage", {})
        return ChatResponse(
            text=choice.get("content"),
            tool_calls=tool_calls,
            usage={k: v for k, v in usage.items() if isinstance(v, int)},
            latency_ms=latency_ms,
        )


def _collapse(text: str) -> str:
    return " ".join(text.split())


def hash_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def request_record(request: ChatRequest, base_dir: Path | None) -> dict[str, Any]:
    """The ModelCall request payload: text plus attachment paths and hashes."""
    messages = []
    for message in request.messages:
        entry: dict[str, Any] = {"role": message.role, "text": message.text}
        if message.attachments:
            attachments = []
            for rel in message.attachments:
                path = (base_dir / rel) if base_dir else Path(rel)
                attachments.append(
                    {"path": rel, "sha256": hash_file(path) if path.exists() else None}
                )
            entry["attachments"] = attachments
        messages.append(entry)
    return {
        "model": request.model,
        "temperature": request.temperature,
        "messages": messages,
        "tools": [t.get("name") for t in request.tools],
    }


def normalize_record(record: dict[str, Any]) -> dict[str, Any]:
    """Whitespace-collapsed text and attachment hashes only, for replay compare."""
    return {
        "text": _collapse(" ".join(m.get("text", "") for m in record.get("messages", []))),
        "attachments": [
            a.get("sha256")
            for m in record.get("messages", [])
            for a in m.get("attachments", [])
        ],
    }


class ReplayBackend:
    """Replays the ModelCall records of a previous run, verifying each request."""

    def __init__(self, records: list[dict[str, Any]], base_dir: Path | None = None):
        self.records = records
        self.base_dir = base_dir
        self.cursor = 0

    @classmethod
    def from_session_dir(cls, session_dir: str | Path, base_dir: Path | None = None) -> "ReplayBackend":
        from .store import read_events
        from .types import EventKind

        records = [
            e.payload for e in read_events(session_dir) if e.kind is EventKind.MODEL_CALL
        ]
        return cls(records, base_dir=base_dir)

    def complete(self, request: ChatRequest) -> ChatResponse:
        turn = self.cursor + 1
        if self.cursor >= len(self.records):
            raise ReplayDivergenceError(turn, request.agent_role, "no recorded call remains")
        record = self.records[self.cursor]
        if record.get("role") != request.agent_role:
            raise ReplayDivergenceError(
                turn, request.agent_role, f"recorded role was {record.get('role')!r}"
            )
        incoming = normalize_record(request_record(request, self.base_dir))
        recorded = normalize_record(record.get("request", {}))
        if incoming != recorded:
            raise ReplayDivergenceError(turn, request.agent_role, "request text/attachments differ")
        self.cursor += 1
        return ChatResponse.from_dict(record["response"])

    @property
    def exhausted(self) -> bool:
        return self.cursor >= len(self.records)


class Gateway:
    """Per-session wrapper that records every call into the event sink."""

    def __init__(
        self,
        backend: Any,
        sink: Callable[[dict[str, Any]], None] | None = None,
        base_dir: Path | None = None,
    ):
        self.backend = backend
        self.sink = sink
        self.base_dir = base_dir

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self.backend.complete(request)
        if self.sink is not None:
            self.sink(
                {
                    "role": request.agent_role,
                    "request": request_record(request, self.base_dir),
                    "response": response.to_dict(),
                }
            )
        return response
