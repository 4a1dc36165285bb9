"""Shared fixtures: a scripted chair-building session, a tiny doc corpus, and
an in-process executor that mirrors the fake worker without a subprocess."""

from __future__ import annotations

import io
import traceback
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import pytest

from blendforge import docrag
from blendforge.bridge import plan_cameras
from blendforge.gateway import ChatResponse, ScriptedBackend, ToolCall, TranscriptEntry
from blendforge.orchestrator import Orchestrator
from blendforge.store import SessionStore
from blendforge.types import (
    ExecutionError,
    ExecutionErrorKind,
    ExecutionOutcome,
    RenderSet,
    RenderView,
    SessionConfig,
)

FIXTURES = Path(__file__).parent / "fixtures"

PNG_STUB = bytes.fromhex(
    "89504e470d0a1a0a0000000d4948445200000001000000010800000000"
    "3a7e9b550000000a49444154789c636000000002000148afa4710000000049454e44ae426082"
)


class FakeClock:
    """Deterministic timestamps: start + step per call."""

    def __init__(self, start: float = 1_000_000.0, step: float = 1.0):
        self.now = start
        self.step = step

    def __call__(self) -> float:
        self.now += self.step
        return self.now


class LocalExecutor:
    """In-process twin of the fake worker: exec in a namespace, stub renders."""

    def __init__(self, reset_before_exec: bool = True):
        self.namespace: dict = {}
        self.last_bbox: list | None = None
        self.reset_before_exec = reset_before_exec
        self.executed: list[str] = []

    def execute(self, source: str, timeout: float | None = None) -> ExecutionOutcome:
        if self.reset_before_exec:
            self.namespace = {}
        self.executed.append(source)
        out, err = io.StringIO(), io.StringIO()
        try:
            with redirect_stdout(out), redirect_stderr(err):
                exec(compile(source, "<session-script>", "exec"), self.namespace)
        except BaseException as exc:
            return ExecutionOutcome(
                ok=False,
                stdout=out.getvalue(),
                stderr=err.getvalue(),
                error=ExecutionError(
                    kind=ExecutionErrorKind.SCRIPT_EXCEPTION,
                    message=f"{type(exc).__name__}: {exc}",
                    traceback=traceback.format_exc(),
                ),
                wall_time_ms=1.0,
            )
        box = self.namespace.get("SCENE_BBOX")
        if box is not None:
            self.last_bbox = [list(map(float, box[0])), list(map(float, box[1]))]
        return ExecutionOutcome(
            ok=True, stdout=out.getvalue(), stderr=err.getvalue(), wall_time_ms=1.0
        )

    def render(self, render_set_id: str, out_dir: Path, m: int, resolution: int) -> RenderSet:
        plan = plan_cameras(self.last_bbox, m)
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        views = []
        for k, (azimuth, elevation) in enumerate(plan.views, start=1):
            path = out_dir / f"view{k}.png"
            path.write_bytes(PNG_STUB)
            views.append(
                RenderView(
                    image_path=str(path),
                    azimuth_deg=azimuth,
                    elevation_deg=elevation,
                    camera_distance=plan.distance,
                )
            )
        bbox = self.last_bbox or [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
        return RenderSet(render_set_id=render_set_id, view_count=m, views=views, bbox=bbox)

    def close(self) -> None:
        pass


def tool_reply(code: str) -> ChatResponse:
    return ChatResponse(tool_calls=[ToolCall("execute_code_tool", {"code": code})])


def text_reply(text: str) -> ChatResponse:
    return ChatResponse(text=text)


CHAIR_V1 = """\
parts = ["legs"]
SCENE_BBOX = [[-0.5, -0.5, 0.0], [0.5, 0.5, 0.45]]
print("legs built")
"""

CHAIR_V2_FAILING = """\
parts = ["legs", "backrest"]
raise KeyError('key "Specular" not found')
"""

CHAIR_V3 = """\
parts = ["legs", "backrest"]
SCENE_BBOX = [[-0.5, -0.5, 0.0], [0.5, 0.5, 1.1]]
print("backrest attached")
"""

CHAIR_V4 = """\
parts = ["legs", "backrest", "seat"]
SCENE_BBOX = [[-0.5, -0.5, 0.0], [0.5, 0.5, 1.1]]
print("seat added")
"""

CHAIR_V5 = """\
parts = ["legs", "backrest", "seat"]
legs_z_offset = 0.05
SCENE_BBOX = [[-0.5, -0.5, 0.0], [0.5, 0.5, 1.1]]
print("critique fixes applied")
"""

CHAIR_V6 = """\
parts = ["legs", "backrest", "seat"]
legs_z_offset = 0.12
SCENE_BBOX = [[-0.5, -0.5, 0.0], [0.5, 0.5, 1.1]]
print("followup applied")
"""


def oracle_transcript() -> list[TranscriptEntry]:
    """Scripted model replies for the chair session: three subtasks, one
    injected execution error on the second, one critique round with two
    critiques, and a Partial -> Resolved verification cycle."""
    return [
        TranscriptEntry(
            "planner",
            text_reply(
                "coding_agent: build the chair legs\n"
                "coding_agent: build the backrest\n"
                "coding_agent: build the seat\n"
                "All subtasks are delegated. COMPLETE"
            ),
            require=["wooden chair"],
        ),
        # retrieval summaries, consumed in order: task 1, task 2, error, task 3
        TranscriptEntry(
            "retrieval",
            text_reply("Use bpy.ops.mesh.primitive_cylinder_add for each leg."),
            require=["legs"],
        ),
        TranscriptEntry(
            "retrieval",
            text_reply("Use bpy.ops.mesh.primitive_cube_add and scale it for the backrest."),
            require=["backrest"],
        ),
        TranscriptEntry(
            "retrieval",
            text_reply(
                'The input key has been renamed: use "Specular IOR Level" instead of "Specular".'
            ),
            require=["Specular"],
        ),
        TranscriptEntry(
            "retrieval",
            text_reply("A scaled cube makes a fine seat."),
            require=["seat"],
        ),
        TranscriptEntry("coding", tool_reply(CHAIR_V1), require=["Subtask 1", "legs"]),
        TranscriptEntry("coding", tool_reply(CHAIR_V2_FAILING), require=["Subtask 2", "backrest"]),
        TranscriptEntry("coding", tool_reply(CHAIR_V3), require=["Specular"]),
        TranscriptEntry("coding", tool_reply(CHAIR_V4), require=["Subtask 3", "seat"]),
        TranscriptEntry(
            "coding",
            tool_reply(CHAIR_V5),
            require=["problem: The legs aren't attached to the seat"],
        ),
        TranscriptEntry("coding", tool_reply(CHAIR_V6), require=["further up the z-axis"]),
        TranscriptEntry(
            "critic",
            text_reply(
                "1. problem: The legs aren't attached to the seat | fix: Move the legs up the z-axis\n"
                "2. problem: The backrest is tilted | fix: Straighten the backrest"
            ),
            require=["wooden chair"],
        ),
        TranscriptEntry(
            "verification",
            text_reply("1. PARTIAL: Move the legs further up the z-axis\n2. RESOLVED"),
            require=["legs aren't attached"],
        ),
        TranscriptEntry("verification", text_reply("1. RESOLVED\n2. RESOLVED")),
    ]


def doc_chunks() -> list[docrag.DocChunk]:
    make = docrag.DocChunk
    return [
        make(
            chunk_id="shading/principled.txt:000:000",
            source_file="shading/principled.txt",
            title="Principled BSDF",
            body=(
                "Principled BSDF inputs changed between versions. The input key has been "
                'renamed to "Specular IOR Level" for Blender 4.x; scripts that set '
                'bsdf.inputs["Specular"] must use the new Specular IOR Level name. '
                "Example: bsdf.inputs['Specular IOR Level'].default_value = 0.6"
            ),
            version_tag="4.4",
        ),
        make(
            chunk_id="modeling/primitives.txt:000:000",
            source_file="modeling/primitives.txt",
            title="Mesh primitives",
            body=(
                "Add primitive meshes with operators such as bpy.ops.mesh.primitive_cube_add, "
                "bpy.ops.mesh.primitive_cylinder_add (good for chair legs), and "
                "bpy.ops.mesh.primitive_uv_sphere_add. A seat or backrest starts as a scaled cube."
            ),
            version_tag="4.4",
        ),
        make(
            chunk_id="modeling/bmesh.txt:000:000",
            source_file="modeling/bmesh.txt",
            title="BMesh module",
            body=(
                "bmesh.new creates a fresh BMesh for manual geometry. Use bm.verts.new and "
                "bm.faces.new to build topology, then bm.to_mesh to write it back."
            ),
            version_tag="4.4",
        ),
    ]


@pytest.fixture
def mini_index() -> docrag.RetrievalIndex:
    return docrag.build_index(doc_chunks(), version_tag="4.4")


@pytest.fixture
def fake_clock() -> FakeClock:
    return FakeClock()


def run_oracle_session(
    base_dir: Path,
    index: docrag.RetrievalIndex,
    clock: FakeClock | None = None,
    session_id: str = "oracle",
    executor=None,
    config: SessionConfig | None = None,
):
    """Run the scripted chair session end to end; returns (store, orchestrator)."""
    store = SessionStore(base_dir, clock=clock or FakeClock())
    store.create_session("create a wooden chair", config or SessionConfig(), session_id=session_id)
    orchestrator = Orchestrator(
        store,
        session_id,
        ScriptedBackend(oracle_transcript()),
        executor or LocalExecutor(),
        rag_index=index,
    )
    orchestrator.run_auto()
    return store, orchestrator


@pytest.fixture
def oracle_run(tmp_path, mini_index):
    store, orch = run_oracle_session(tmp_path / "sessions", mini_index)
    return store, orch


def write_transcript(path: Path, entries: list[TranscriptEntry]) -> Path:
    """Serialize transcript entries into the JSON fixture format the runtime loads."""
    import json

    data = []
    for entry in entries:
        response: dict = {}
        if entry.response.text is not None:
            response["text"] = entry.response.text
        if entry.response.tool_calls:
            response["tool_calls"] = [
                {"name": t.name, "arguments": t.arguments} for t in entry.response.tool_calls
            ]
        data.append({"role": entry.role, "require": entry.require, "response": response})
    path.write_text(json.dumps(data, indent=2), encoding="utf-8")
    return path


def saved_index_dir(base: Path) -> Path:
    """Persist the test corpus index and return its directory."""
    index = docrag.build_index(doc_chunks(), version_tag="4.4")
    return docrag.save_index(index, base / "ragindex")


def wait_until(predicate, timeout: float = 30.0, interval: float = 0.05) -> bool:
    import time

    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return False


class LiveServer:
    """uvicorn on an ephemeral port in a daemon thread, for streaming tests."""

    def __init__(self, app):
        import threading

        import uvicorn

        self._config = uvicorn.Config(app, host="127.0.0.1", port=0, log_level="warning")
        self._server = uvicorn.Server(self._config)
        self._thread = threading.Thread(target=self._server.run, daemon=True)
        self._thread.start()
        if not wait_until(lambda: self._server.started, timeout=15):
            raise RuntimeError("uvicorn did not start")
        self.port = self._server.servers[0].sockets[0].getsockname()[1]

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=10)
