"""Host side of the script-execution harness.

A worker process (real Blender running the shim, or the pure-software fake)
speaks newline-delimited JSON on its stdio: exactly one request object per
line in, exactly one response object per line out, worker logging on stderr.

Request:  {"id": int, "op": "ping"|"exec"|"render"|"reset", "payload": {...}}
Response: {"id": int, "ok": bool, "stdout": str, "stderr": str,
           "error": {"type","message","traceback"}|null,
           "artifacts": [paths], "result": {...}|null}

``result`` carries op-specific data: the worker version on ping, the scene
bounding box after an exec, and bbox plus per-view records after a render.

Failure mapping is the heart of this module: a worker that times out, dies,
or violates the protocol yields an honest ExecutionOutcome of the matching
kind and is replaced by a fresh Ready worker before the call returns.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import subprocess
import sys
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .types import (
    ExecutionError,
    ExecutionErrorKind,
    ExecutionOutcome,
    RenderSet,
    RenderView,
)

log = logging.getLogger(__name__)

FALLBACK_CAMERA_DISTANCE = 5.0


class BridgeError(Exception):
    pass


class WorkerStartError(BridgeError):
    pass


class RenderError(BridgeError):
    pass


class CameraPlanError(BridgeError):
    pass


# -- wire records --------------------------------------------------------------

@dataclass
class ExecRequest:
    id: int
    op: str
    payload: dict[str, Any] = field(default_factory=dict)


@dataclass
class ExecResponse:
    id: int
    ok: bool
    stdout: str = ""
    stderr: str = ""
    error: dict[str, Any] | None = None
    artifacts: list[str] = field(default_factory=list)
    result: dict[str, Any] | None = None


def encode_request(request: ExecRequest) -> str:
    return json.dumps(
        {"id": request.id, "op": request.op, "payload": request.payload},
        ensure_ascii=False,
        sort_keys=True,
        separators=(",", ":"),
    )


def decode_request(line: str) -> ExecRequest:
    d = json.loads(line)
    return ExecRequest(id=d["id"], op=d["op"], payload=d.get("payload", {}))


def encode_response(response: ExecResponse) -> str:
    return json.dumps(
        {
            "artifacts": response.artifacts,
            "error": response.error,
            "id": response.id,
            "ok": response.ok,
            "result": response.result,
            "stderr": response.stderr,
            "stdout": response.stdout,
        },
        ensure_ascii=False,
        sort_keys=True,
        separators=(",", ":"),
    )


def decode_response(line: str) -> ExecResponse:
    d = json.loads(line)
    return ExecResponse(
        id=d["id"],
        ok=d["ok"],
        stdout=d.get("stdout", ""),
        stderr=d.get("stderr", ""),
        error=d.get("error"),
        artifacts=d.get("artifacts", []),
        result=d.get("result"),
    )


# -- camera planning -----------------------------------------------------------

@dataclass
class CameraPlan:
    views: list[tuple[float, float]]  # (azimuth_deg, elevation_deg)
    distance: float
    target: tuple[float, float, float]
    fov_deg: float

    def to_payload(self) -> dict[str, Any]:
        return {
            "views": [[a, e] for a, e in self.views],
            "distance": self.distance,
            "target": list(self.target),
            "fov_deg": self.fov_deg,
        }


def plan_cameras(
    bbox: list[list[float]] | None,
    m: int,
    fov_deg: float = 50.0,
    margin: float = 1.2,
) -> CameraPlan:
    """Place ``m`` cameras around the scene bounding box.

    The camera distance scales so the bounding sphere fits the field of view:
    ``distance = margin * r / sin(fov/2)`` where ``r`` is half the bbox
    diagonal. A degenerate bbox (empty scene, single point) falls back to a
    fixed distance. Five views use four oblique angles plus a top view; other
    counts spread evenly at 30 degrees elevation, adding the top view once
    there are at least five.
    """
    if m < 1:
        raise CameraPlanError("at least one view is required")
    if not (0.0 < fov_deg < 180.0):
        raise CameraPlanError(f"fov must be in (0, 180), got {fov_deg}")

    if bbox is None:
        bbox = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
    lo, hi = bbox
    target = tuple((lo[i] + hi[i]) / 2.0 for i in range(3))
    r = 0.5 * math.dist(lo, hi)
    if r == 0.0:
        distance = FALLBACK_CAMERA_DISTANCE
    else:
        distance = margin * r / math.sin(math.radians(fov_deg) / 2.0)

    if m == 5:
        views = [(45.0, 30.0), (135.0, 30.0), (225.0, 30.0), (315.0, 30.0), (0.0, 85.0)]
    elif m >= 5:
        ring = m - 1
        views = [(45.0 + 360.0 * i / ring, 30.0) for i in range(ring)]
        views.append((0.0, 85.0))
    else:
        views = [(45.0 + 360.0 * i / m, 30.0) for i in range(m)]
    return CameraPlan(views=views, distance=distance, target=target, fov_deg=fov_deg)


def camera_position(
    azimuth_deg: float, elevation_deg: float, distance: float, target: tuple[float, float, float]
) -> tuple[float, float, float]:
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    return (
        target[0] + distance * math.cos(el) * math.cos(az),
        target[1] + distance * math.cos(el) * math.sin(az),
        target[2] + distance * math.sin(el),
    )


# -- worker supervision ----------------------------------------------------------

@dataclass
class WorkerConfig:
    argv: list[str]
    startup_timeout_s: float = 30.0
    exec_timeout_s: float = 120.0
    handshake_token: str = ""

    def __post_init__(self) -> None:
        if not self.handshake_token:
            self.handshake_token = uuid.uuid4().hex[:8]


def fake_worker_config(**kwargs: Any) -> WorkerConfig:
    shim = Path(__file__).with_name("fake_worker.py")
    return WorkerConfig(argv=[sys.executable, "-u", str(shim)], **kwargs)


def blender_worker_config(blender_path: str, **kwargs: Any) -> WorkerConfig:
    shim = Path(__file__).with_name("blender_worker.py")
    config = WorkerConfig(argv=[], **kwargs)
    config.argv = [
        blender_path,
        "--background",
        "--python",
        str(shim),
        "--",
        "--handshake-token",
        config.handshake_token,
    ]
    return config


_EOF = object()


class WorkerSupervisor:
    """Owns one worker process: spawn, handshake, request/response, restart.

    At most one request is in flight. Every fault (timeout, crash, protocol
    violation) is mapped to an honest outcome and followed by a synchronous
    restart, so the supervisor is Ready again when ``execute`` returns.
    """

    def __init__(self, config: WorkerConfig):
        self.config = config
        self.state = "Starting"
        self.blender_version = ""
        self.last_bbox: list[list[float]] | None = None
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue = queue.Queue()
        self._stderr_tail: deque[str] = deque(maxlen=50)
        self._next_id = 0
        self._lock = threading.Lock()
        self._spawn()

    # -- lifecycle

    def _spawn(self) -> None:
        self.state = "Starting"
        self._lines = queue.Queue()
        self._stderr_tail = deque(maxlen=50)
        try:
            self._proc = subprocess.Popen(
                self.config.argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as exc:
            self.state = "Dead"
            raise WorkerStartError(f"failed to launch worker: {exc}") from exc
        threading.Thread(target=self._read_stdout, args=(self._proc, self._lines), daemon=True).start()
        threading.Thread(target=self._read_stderr, args=(self._proc,), daemon=True).start()
        try:
            response = self._roundtrip(
                "ping", {"token": self.config.handshake_token}, self.config.startup_timeout_s
            )
        except BridgeError as exc:
            self._kill()
            raise WorkerStartError(
                f"worker handshake failed: {exc}; stderr tail: {self._stderr_text()}"
            ) from exc
        result = response.result or {}
        if result.get("token") != self.config.handshake_token:
            self._kill()
            raise WorkerStartError("worker did not echo the handshake token")
        self.blender_version = result.get("blender_version", "unknown")
        self.state = "Ready"

    @staticmethod
    def _read_stdout(proc: subprocess.Popen, lines: queue.Queue) -> None:
        assert proc.stdout is not None
        for line in proc.stdout:
            lines.put(line)
        lines.put(_EOF)

    def _read_stderr(self, proc: subprocess.Popen) -> None:
        assert proc.stderr is not None
        for line in proc.stderr:
            self._stderr_tail.append(line.rstrip("\n"))

    def _stderr_text(self) -> str:
        return " | ".join(self._stderr_tail) or "(empty)"

    def _kill(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.kill()
            try:
                self._proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                pass
        self.state = "Dead"

    def restart(self) -> None:
        self._kill()
        self.last_bbox = None
        self._spawn()

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            try:
                assert self._proc.stdin is not None
                self._proc.stdin.close()
                self._proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                self._kill()
                return
        self.state = "Dead"

    # -- protocol

    class _WorkerDied(BridgeError):
        pass

    class _ProtocolViolation(BridgeError):
        pass

    class _RequestTimeout(BridgeError):
        pass

    def _roundtrip(self, op: str, payload: dict[str, Any], timeout: float) -> ExecResponse:
        assert self._proc is not None and self._proc.stdin is not None
        self._next_id += 1
        request = ExecRequest(id=self._next_id, op=op, payload=payload)
        try:
            self._proc.stdin.write(encode_request(request) + "\n")
            self._proc.stdin.flush()
        except (OSError, ValueError) as exc:
            raise self._WorkerDied(f"could not write to worker: {exc}") from exc
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise self._RequestTimeout(f"no response to {op} within {timeout:.1f}s")
            try:
                item = self._lines.get(timeout=min(remaining, 0.5))
            except queue.Empty:
                continue
            if item is _EOF:
                code = self._proc.poll()
                raise self._WorkerDied(f"worker exited (code {code}); stderr: {self._stderr_text()}")
            line = item.strip()
            if not line:
                continue
            try:
                response = decode_response(line)
            except (json.JSONDecodeError, KeyError) as exc:
                raise self._ProtocolViolation(f"malformed response line: {line[:120]!r} ({exc})") from exc
            if response.id != request.id:
                raise self._ProtocolViolation(
                    f"response id {response.id} does not match request id {request.id}"
                )
            return response

    # -- operations

    def execute(self, source: str, timeout: float | None = None) -> ExecutionOutcome:
        """Run a script payload; always returns an outcome and a Ready worker."""
        timeout = timeout if timeout is not None else self.config.exec_timeout_s
        with self._lock:
            if self.state != "Ready":
                self.restart()
            self.state = "Busy"
            started = time.monotonic()
            try:
                response = self._roundtrip("exec", {"code": source}, timeout)
            except self._RequestTimeout as exc:
                self.restart()
                return self._failure(ExecutionErrorKind.TIMEOUT, str(exc), started)
            except self._WorkerDied as exc:
                self.restart()
                return self._failure(ExecutionErrorKind.WORKER_CRASH, str(exc), started)
            except self._ProtocolViolation as exc:
                self.restart()
                return self._failure(ExecutionErrorKind.PROTOCOL_ERROR, str(exc), started)
            self.state = "Ready"
            wall_ms = (time.monotonic() - started) * 1000
            if response.result and "bbox" in response.result:
                self.last_bbox = response.result["bbox"]
            if response.ok:
                return ExecutionOutcome(
                    ok=True, stdout=response.stdout, stderr=response.stderr, wall_time_ms=wall_ms
                )
            err = response.error or {}
            return ExecutionOutcome(
                ok=False,
                stdout=response.stdout,
                stderr=response.stderr,
                error=ExecutionError(
                    kind=ExecutionErrorKind(err.get("type", "ScriptException")),
                    message=err.get("message", "unknown error"),
                    traceback=err.get("traceback") or "(no traceback reported)",
                ),
                wall_time_ms=wall_ms,
            )

    def _failure(self, kind: ExecutionErrorKind, message: str, started: float) -> ExecutionOutcome:
        return ExecutionOutcome(
            ok=False,
            error=ExecutionError(kind=kind, message=message, traceback=None),
            wall_time_ms=(time.monotonic() - started) * 1000,
        )

    def reset(self) -> None:
        with self._lock:
            if self.state != "Ready":
                self.restart()
            self.state = "Busy"
            try:
                self._roundtrip("reset", {}, self.config.exec_timeout_s)
            except BridgeError as exc:
                log.warning("reset failed (%s); restarting worker", exc)
                self.restart()
                return
            self.state = "Ready"
            self.last_bbox = None

    def render(
        self, plan: CameraPlan, out_dir: str | Path, resolution: int, timeout: float | None = None
    ) -> ExecResponse:
        timeout = timeout if timeout is not None else self.config.exec_timeout_s
        with self._lock:
            if self.state != "Ready":
                self.restart()
            self.state = "Busy"
            try:
                response = self._roundtrip(
                    "render",
                    {"plan": plan.to_payload(), "resolution": resolution, "out_dir": str(out_dir)},
                    timeout,
                )
            except BridgeError as exc:
                self.restart()
                raise RenderError(f"render failed: {exc}") from exc
            self.state = "Ready"
            return response


def start_worker(config: WorkerConfig) -> WorkerSupervisor:
    return WorkerSupervisor(config)


def render_views(
    worker: WorkerSupervisor,
    plan: CameraPlan,
    out_dir: str | Path,
    resolution: int,
    render_set_id: str,
) -> RenderSet:
    """Render one batch of views and check every output file landed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    response = worker.render(plan, out_dir, resolution)
    if not response.ok:
        err = response.error or {}
        raise RenderError(f"worker reported render failure: {err.get('message', 'unknown')}")
    result = response.result or {}
    views_data = result.get("views", [])
    missing = [v["image_path"] for v in views_data if not Path(v["image_path"]).exists()]
    if missing or len(views_data) != len(plan.views):
        raise RenderError(
            f"render produced {len(views_data)}/{len(plan.views)} views; missing files: {missing}"
        )
    views = [
        RenderView(
            image_path=v["image_path"],
            azimuth_deg=v["azimuth_deg"],
            elevation_deg=v["elevation_deg"],
            camera_distance=v["camera_distance"],
        )
        for v in views_data
    ]
    bbox = result.get("bbox") or [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
    if "bbox" in result:
        worker.last_bbox = result["bbox"]
    return RenderSet(render_set_id=render_set_id, view_count=len(views), views=views, bbox=bbox)


class BridgeExecutor:
    """Adapter the orchestrator drives: execute scripts, produce render sets."""

    def __init__(
        self,
        worker: WorkerSupervisor,
        fov_deg: float = 50.0,
        margin: float = 1.2,
        reset_before_exec: bool = True,
    ):
        self.worker = worker
        self.fov_deg = fov_deg
        self.margin = margin
        self.reset_before_exec = reset_before_exec

    @property
    def last_bbox(self) -> list[list[float]] | None:
        return self.worker.last_bbox

    def execute(self, source: str, timeout: float | None = None) -> ExecutionOutcome:
        if self.reset_before_exec:
            self.worker.reset()
        return self.worker.execute(source, timeout=timeout)

    def render(self, render_set_id: str, out_dir: Path, m: int, resolution: int) -> RenderSet:
        plan = plan_cameras(self.worker.last_bbox, m, fov_deg=self.fov_deg, margin=self.margin)
        return render_views(self.worker, plan, out_dir, resolution, render_set_id)

    def close(self) -> None:
        self.worker.close()
