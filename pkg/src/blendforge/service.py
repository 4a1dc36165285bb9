"""HTTP service: session lifecycle, live event stream, artifacts, and the UI.

The event stream is server-sent events. Each frame is one session event as it
sits in events.ndjson, wrapped as ``{"seq": n, "event": {...}}``; streaming
from seq 1 therefore reproduces the log exactly. The stream serves history
first, then tails live appends, and closes once the session is terminal and
fully delivered. Keepalive comments flow every half second so proxies and
clients notice drops quickly; clients resume with ``?from_seq=``.
"""

from __future__ import annotations

import time
from pathlib import Path
from typing import Any, AsyncIterator

import anyio
from fastapi import FastAPI, HTTPException, Response
from fastapi.responses import FileResponse, StreamingResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .runtime import Runtime
from .store import UnknownSessionError, json_line
from .types import Phase


class CreateSessionBody(BaseModel):
    goal: str = Field(min_length=1)
    config: dict[str, Any] = Field(default_factory=dict)


class RefineBody(BaseModel):
    text: str = Field(min_length=1)


def session_summary(runtime: Runtime, session_id: str) -> dict[str, Any]:
    state = runtime.store.state(session_id)
    events = state.event_log
    latest = state.latest_code
    latest_render = state.latest_render_set
    return {
        "session_id": state.session_id,
        "goal": state.goal,
        "phase": state.phase.value,
        "latest_code_version": latest.version if latest else None,
        "latest_render_set_id": latest_render.render_set_id if latest_render else None,
        "created_at": events[0].timestamp if events else None,
        "updated_at": events[-1].timestamp if events else None,
    }


def create_app(runtime: Runtime, ui_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="blendforge", version="0.1.0")
    app.state.runtime = runtime

    def _state_or_404(session_id: str):
        try:
            return runtime.store.state(session_id)
        except UnknownSessionError:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionBody) -> dict[str, str]:
        runner = runtime.start_session(body.goal, config_overrides=body.config)
        return {"session_id": runner.session_id}

    @app.get("/sessions")
    def list_sessions() -> list[dict[str, Any]]:
        summaries = []
        for session_id in runtime.store.list_session_ids():
            try:
                runtime.store.load_session(session_id)
                summaries.append(session_summary(runtime, session_id))
            except (UnknownSessionError, OSError):
                continue
        return summaries

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str) -> dict[str, Any]:
        _state_or_404(session_id)
        return session_summary(runtime, session_id)

    @app.get("/sessions/{session_id}/events")
    async def stream_events(session_id: str, from_seq: int = 1) -> StreamingResponse:
        _state_or_404(session_id)

        async def frames() -> AsyncIterator[str]:
            # async polling (not a thread-blocking wait) so starlette can
            # cancel the generator the moment the client disconnects
            cursor = max(from_seq - 1, 0)
            while True:
                events = runtime.store.events(session_id, from_seq=cursor + 1)
                for event in events:
                    cursor = event.seq
                    frame = {"seq": event.seq, "event": event.to_dict()}
                    yield f"id: {event.seq}\ndata: {json_line(frame)}\n\n"
                state = runtime.store.state(session_id)
                if state.phase.terminal and cursor >= len(state.event_log):
                    return
                if not events:
                    yield ": keepalive\n\n"
                    await anyio.sleep(0.2)

        return StreamingResponse(frames(), media_type="text/event-stream")

    @app.post("/sessions/{session_id}/refine", status_code=202)
    def refine(session_id: str, body: RefineBody) -> dict[str, Any]:
        state = _state_or_404(session_id)
        if state.phase is not Phase.USER_REFINE:
            raise HTTPException(
                status_code=409,
                detail=f"session is in phase {state.phase.value}; refinement requires UserRefine",
            )
        runner = runtime.runner(session_id)
        if runner is None:
            raise HTTPException(status_code=409, detail="session has no active runner")
        request = runner.submit_refinement(body.text, submitted_at=time.time())
        return {"queued": True, "terminator": request.terminator}

    @app.post("/sessions/{session_id}/terminate")
    def terminate(session_id: str) -> dict[str, Any]:
        state = _state_or_404(session_id)
        if state.phase is Phase.TERMINATED:
            return {"phase": state.phase.value}  # idempotent, no new events
        if state.phase is not Phase.USER_REFINE:
            raise HTTPException(
                status_code=409,
                detail=f"session is in phase {state.phase.value}; cannot terminate yet",
            )
        runner = runtime.runner(session_id)
        if runner is None:
            raise HTTPException(status_code=409, detail="session has no active runner")
        runner.submit_refinement(state.config.termination_keyword, submitted_at=time.time())
        return {"phase": state.phase.value, "queued": True}

    @app.get("/sessions/{session_id}/code/{version}")
    def get_code(session_id: str, version: int) -> Response:
        _state_or_404(session_id)
        try:
            data = runtime.store.read_code(session_id, version)
        except UnknownSessionError:
            raise HTTPException(status_code=404, detail=f"no code version {version}")
        return Response(content=data, media_type="text/x-python")

    @app.get("/sessions/{session_id}/renders/{render_set_id}/{view}")
    def get_render(session_id: str, render_set_id: str, view: str) -> FileResponse:
        _state_or_404(session_id)
        name = view if view.endswith(".png") else f"view{view}.png"
        path = runtime.store.session_dir(session_id) / "renders" / render_set_id / name
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"no render {render_set_id}/{name}")
        return FileResponse(path, media_type="image/png")

    if ui_dir and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
