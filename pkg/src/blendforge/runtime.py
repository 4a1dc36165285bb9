"""Configuration layering and session wiring shared by the CLI and the service.

Configuration is a flat key-value map merged from four layers, weakest first:
built-in defaults, a JSON config file, ``BLENDFORGE_*`` environment variables,
and explicit CLI flags. Keys:

    base_dir                 where session directories live
    backend.kind             scripted | live | replay
    backend.transcript       scripted: path to a transcript fixture (JSON)
    backend.providers        live: path to a provider bindings file (JSON)
    backend.replay_dir       replay: session directory to replay from
    worker.kind              fake | blender
    worker.blender_path      blender executable for worker.kind=blender
    worker.startup_timeout_s
    rag.index_dir            prebuilt retrieval index directory
    rag.docs_dir             build an index from raw docs at startup
    rag.version_tag
    session.<field>          any SessionConfig field, e.g. session.m_views

Environment variables use upper snake case with ``__`` for dots:
``BLENDFORGE_BACKEND__KIND=scripted`` sets ``backend.kind``.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import threading
from pathlib import Path
from typing import Any

from . import docrag
from .bridge import (
    BridgeExecutor,
    blender_worker_config,
    fake_worker_config,
    start_worker,
)
from .gateway import LiveBackend, ProviderBinding, ReplayBackend, ScriptedBackend, load_transcript
from .orchestrator import Orchestrator
from .store import SessionStore, read_events
from .types import EventKind, Phase, RefinementRequest, SessionConfig

log = logging.getLogger(__name__)

ENV_PREFIX = "BLENDFORGE_"

DEFAULTS: dict[str, Any] = {
    "base_dir": "./sessions",
    "backend.kind": "scripted",
    "worker.kind": "fake",
    "worker.startup_timeout_s": 30.0,
}


class ConfigError(Exception):
    pass


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except (json.JSONDecodeError, ValueError):
        return raw


def load_config(
    config_file: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
    env: dict[str, str] | None = None,
) -> dict[str, Any]:
    """Merge defaults < file < environment < explicit overrides."""
    merged = dict(DEFAULTS)
    if config_file:
        data = json.loads(Path(config_file).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        merged.update(data)
    env = env if env is not None else dict(os.environ)
    for key, value in env.items():
        if key.startswith(ENV_PREFIX):
            dotted = key[len(ENV_PREFIX):].lower().replace("__", ".")
            merged[dotted] = _parse_value(value)
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def session_config_from(config: dict[str, Any]) -> SessionConfig:
    fields = {}
    for key, value in config.items():
        if key.startswith("session."):
            fields[key[len("session."):]] = value
    return SessionConfig.from_dict({**SessionConfig().to_dict(), **fields})


class Runtime:
    """Everything a session needs, built once from the merged configuration."""

    def __init__(self, config: dict[str, Any], clock=None):
        self.config = config
        self.store = SessionStore(config["base_dir"], clock=clock)
        self.rag_index = self._build_rag_index()
        self._runners: dict[str, SessionRunner] = {}
        self._lock = threading.Lock()

    def _build_rag_index(self) -> docrag.RetrievalIndex | None:
        index_dir = self.config.get("rag.index_dir")
        if index_dir:
            return docrag.load_index(index_dir)
        docs_dir = self.config.get("rag.docs_dir")
        if docs_dir:
            chunks = docrag.ingest(docs_dir, version_tag=self.config.get("rag.version_tag", ""))
            return docrag.build_index(chunks)
        return None

    def build_backend(self, session_dir: Path | None = None, consumed: dict[str, int] | None = None):
        kind = self.config.get("backend.kind", "scripted")
        if kind == "scripted":
            transcript = self.config.get("backend.transcript")
            if not transcript:
                raise ConfigError("backend.kind=scripted requires backend.transcript")
            backend = ScriptedBackend(load_transcript(transcript))
            for role, count in (consumed or {}).items():
                backend.skip(role, count)
            return backend
        if kind == "live":
            providers_file = self.config.get("backend.providers")
            if not providers_file:
                raise ConfigError("backend.kind=live requires backend.providers")
            raw = json.loads(Path(providers_file).read_text(encoding="utf-8"))
            bindings = {
                role: ProviderBinding(
                    provider=b.get("provider", "openai"),
                    model=b.get("model", ""),
                    endpoint=b["endpoint"],
                    api_key_env=b.get("api_key_env", "OPENAI_API_KEY"),
                )
                for role, b in raw.items()
            }
            return LiveBackend(bindings)
        if kind == "replay":
            replay_dir = self.config.get("backend.replay_dir")
            if not replay_dir:
                raise ConfigError("backend.kind=replay requires backend.replay_dir")
            return ReplayBackend.from_session_dir(replay_dir, base_dir=session_dir)
        raise ConfigError(f"unknown backend.kind {kind!r}")

    def build_executor(self, session_config: SessionConfig) -> BridgeExecutor:
        kind = self.config.get("worker.kind", "fake")
        startup = float(self.config.get("worker.startup_timeout_s", 30.0))
        if kind == "fake":
            worker_config = fake_worker_config(
                startup_timeout_s=startup, exec_timeout_s=session_config.exec_timeout_s
            )
        elif kind == "blender":
            blender_path = self.config.get("worker.blender_path", "blender")
            worker_config = blender_worker_config(
                blender_path,
                startup_timeout_s=startup,
                exec_timeout_s=session_config.exec_timeout_s,
            )
        else:
            raise ConfigError(f"unknown worker.kind {kind!r}")
        worker = start_worker(worker_config)
        return BridgeExecutor(
            worker,
            fov_deg=session_config.render_fov_deg,
            margin=session_config.camera_margin,
            reset_before_exec=session_config.exec_mode == "rebuild",
        )

    # -- runners -------------------------------------------------------------

    def start_session(
        self,
        goal: str,
        config_overrides: dict[str, Any] | None = None,
        session_id: str | None = None,
        background: bool = True,
    ) -> "SessionRunner":
        session_config = session_config_from(self.config)
        if config_overrides:
            session_config = SessionConfig.from_dict(
                {**session_config.to_dict(), **config_overrides}
            )
        state = self.store.create_session(goal, session_config, session_id=session_id)
        runner = SessionRunner(self, state.session_id)
        with self._lock:
            self._runners[state.session_id] = runner
        if background:
            runner.start()
        return runner

    def runner(self, session_id: str) -> "SessionRunner | None":
        with self._lock:
            return self._runners.get(session_id)

    def shutdown(self) -> None:
        with self._lock:
            runners = list(self._runners.values())
        for runner in runners:
            runner.stop()


def consumed_model_calls(session_dir: Path) -> dict[str, int]:
    """Per-role count of recorded model calls, for resuming scripted transcripts."""
    counts: dict[str, int] = {}
    for event in read_events(session_dir):
        if event.kind is EventKind.MODEL_CALL:
            counts[event.payload["role"]] = counts.get(event.payload["role"], 0) + 1
    return counts


class SessionRunner:
    """Owns one session's worker and turn loop; phase three feeds off a queue."""

    def __init__(self, runtime: Runtime, session_id: str):
        self.runtime = runtime
        self.session_id = session_id
        self.requests: "queue.Queue[RefinementRequest]" = queue.Queue()
        self.busy = threading.Event()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.error: str | None = None

    @property
    def state(self):
        return self.runtime.store.state(self.session_id)

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name=f"session-{self.session_id}", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        store = self.runtime.store
        session_dir = store.session_dir(self.session_id)
        try:
            executor = self.runtime.build_executor(self.state.config)
        except Exception as exc:
            log.exception("worker start failed for %s", self.session_id)
            self.error = str(exc)
            return
        try:
            backend = self.runtime.build_backend(session_dir=session_dir)
            orchestrator = Orchestrator(
                store,
                self.session_id,
                backend,
                executor,
                rag_index=self.runtime.rag_index,
            )
            self.busy.set()
            orchestrator.run_auto()
            self.busy.clear()
            while not self._stop.is_set() and self.state.phase is Phase.USER_REFINE:
                try:
                    request = self.requests.get(timeout=0.2)
                except queue.Empty:
                    continue
                self.busy.set()
                try:
                    orchestrator.run_phase3_step(request)
                finally:
                    self.busy.clear()
        except Exception as exc:
            log.exception("session %s crashed", self.session_id)
            self.error = str(exc)
        finally:
            executor.close()

    def run_blocking(self, phases: tuple[int, ...] = (1, 2)) -> None:
        """Synchronous run for the CLI: planner plus the requested phases."""
        store = self.runtime.store
        executor = self.runtime.build_executor(self.state.config)
        try:
            backend = self.runtime.build_backend(session_dir=store.session_dir(self.session_id))
            orchestrator = Orchestrator(
                store, self.session_id, backend, executor, rag_index=self.runtime.rag_index
            )
            orchestrator.run_auto(phases=phases)
        finally:
            executor.close()

    def submit_refinement(self, text: str, submitted_at: float) -> RefinementRequest:
        request = RefinementRequest(
            text=text,
            submitted_at=submitted_at,
            terminator=text.strip() == self.state.config.termination_keyword,
        )
        self.requests.put(request)
        return request

    def stop(self) -> None:
        self._stop.set()

    def join(self, timeout: float | None = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout=timeout)
