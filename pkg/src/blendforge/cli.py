"""Command-line interface.

Subcommands: serve, create, refine, status, ragindex, ragquery, metrics,
replay. Every command exits nonzero with a one-line diagnostic on stderr when
something goes wrong.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import docrag, opmetrics
from .gateway import ReplayBackend, ReplayDivergenceError
from .orchestrator import Orchestrator
from .runtime import Runtime, consumed_model_calls, load_config
from .store import normalized_log, read_events
from .types import EventKind, Phase, RefinementRequest


def _parse_overrides(pairs: list[str]) -> dict:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def _runtime(args: argparse.Namespace) -> Runtime:
    overrides = _parse_overrides(getattr(args, "set", []) or [])
    if getattr(args, "base_dir", None):
        overrides["base_dir"] = args.base_dir
    config = load_config(getattr(args, "config", None), overrides)
    return Runtime(config)


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    runtime = _runtime(args)
    ui_dir = args.ui_dir or str(Path(__file__).parent.parent.parent / "frontend" / "dist")
    app = create_app(runtime, ui_dir=ui_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def cmd_create(args: argparse.Namespace) -> int:
    runtime = _runtime(args)
    phases = tuple(int(p) for p in args.phases.split(","))
    runner = runtime.start_session(args.goal, session_id=args.session_id, background=False)
    runner.run_blocking(phases=phases)
    state = runner.state
    print(runtime.store.session_dir(runner.session_id))
    if state.phase is Phase.FAILED:
        print("session failed; see the event log for the last error", file=sys.stderr)
        return 1
    return 0


def cmd_refine(args: argparse.Namespace) -> int:
    runtime = _runtime(args)
    store = runtime.store
    state = store.load_session(args.session_id)
    if state.phase is not Phase.USER_REFINE:
        print(f"session is in phase {state.phase.value}; refinement requires UserRefine", file=sys.stderr)
        return 1
    session_dir = store.session_dir(args.session_id)
    backend = runtime.build_backend(
        session_dir=session_dir, consumed=consumed_model_calls(session_dir)
    )
    executor = runtime.build_executor(state.config)
    try:
        orchestrator = Orchestrator(
            store, args.session_id, backend, executor, rag_index=runtime.rag_index
        )
        request = RefinementRequest(
            text=args.text,
            submitted_at=time.time(),
            terminator=args.text.strip() == state.config.termination_keyword,
        )
        orchestrator.run_phase3_step(request)
    finally:
        executor.close()
    print(f"phase: {store.state(args.session_id).phase.value}")
    return 0


def cmd_status(args: argparse.Namespace) -> int:
    runtime = _runtime(args)
    state = runtime.store.load_session(args.session_id)
    latest = state.latest_code
    print(f"session:  {state.session_id}")
    print(f"goal:     {state.goal}")
    print(f"phase:    {state.phase.value}")
    print(f"subtasks: {len(state.subtasks)}")
    print(f"versions: {latest.version if latest else 0}")
    print(f"renders:  {len(state.render_sets)}")
    print(f"events:   {len(state.event_log)}")
    return 0


def cmd_ragindex(args: argparse.Namespace) -> int:
    chunks = docrag.ingest(args.docs_dir, version_tag=args.version_tag)
    index = docrag.build_index(chunks)
    out = docrag.save_index(index, args.out_dir)
    print(f"{index.n_docs} chunks indexed into {out}")
    return 0


def cmd_ragquery(args: argparse.Namespace) -> int:
    index = docrag.load_index(args.index_dir)
    hits = docrag.query(index, args.text, k=args.k)
    if not hits:
        print("(no matches)")
        return 0
    for chunk_id, score in hits:
        print(f"{chunk_id}\t{score:.4f}")
    return 0


def cmd_metrics(args: argparse.Namespace) -> int:
    patterns = opmetrics.load_patterns(args.patterns)
    table = opmetrics.aggregate(args.inputs, without_rag=args.without, patterns=patterns)
    print(table.to_text())
    if args.csv:
        Path(args.csv).write_text(table.to_csv(), encoding="utf-8")
        print(f"csv written to {args.csv}", file=sys.stderr)
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    source_dir = Path(args.session_dir)
    events = read_events(source_dir)
    first = events[0]
    goal = first.payload["goal"]
    session_config = first.payload["config"]

    refinements = [
        RefinementRequest.from_dict(e.payload["refinement"])
        for e in events
        if e.kind is EventKind.TURN_ENDED and e.payload.get("role") == "user"
    ]

    overrides = _parse_overrides(getattr(args, "set", []) or [])
    overrides["base_dir"] = args.out_dir or str(source_dir.parent / f"{source_dir.name}-replay")
    config = load_config(getattr(args, "config", None), overrides)
    runtime = Runtime(config)
    runner = runtime.start_session(goal, config_overrides=session_config, background=False)
    store = runtime.store
    new_dir = store.session_dir(runner.session_id)

    backend = ReplayBackend.from_session_dir(source_dir, base_dir=new_dir)
    executor = runtime.build_executor(runner.state.config)
    try:
        orchestrator = Orchestrator(
            store, runner.session_id, backend, executor, rag_index=runtime.rag_index
        )
        orchestrator.run_auto()
        for request in refinements:
            if store.state(runner.session_id).phase is not Phase.USER_REFINE:
                break
            orchestrator.run_phase3_step(request)
    except ReplayDivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 1
    finally:
        executor.close()

    original = normalized_log(source_dir)
    replayed = normalized_log(new_dir)
    if original != replayed:
        for i, (a, b) in enumerate(zip(original, replayed), start=1):
            if a != b:
                print(f"divergence: event {i} differs after normalization", file=sys.stderr)
                return 1
        print(
            f"divergence: event counts differ ({len(original)} recorded, {len(replayed)} replayed)",
            file=sys.stderr,
        )
        return 1
    print(f"replay OK: {len(replayed)} events, zero divergence ({new_dir})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blendforge")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--base-dir", help="session storage directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")

    p = sub.add_parser("serve", help="start the HTTP service")
    common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8400)
    p.add_argument("--ui-dir", help="built UI bundle to serve under /ui/")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("create", help="create a session and run the automatic phases")
    common(p)
    p.add_argument("goal")
    p.add_argument("--phases", default="1,2", help="comma list, e.g. 1 or 1,2")
    p.add_argument("--session-id")
    p.set_defaults(fn=cmd_create)

    p = sub.add_parser("refine", help="run one user-refinement step on a stored session")
    common(p)
    p.add_argument("session_id")
    p.add_argument("text")
    p.set_defaults(fn=cmd_refine)

    p = sub.add_parser("status", help="print a session summary")
    common(p)
    p.add_argument("session_id")
    p.set_defaults(fn=cmd_status)

    p = sub.add_parser("ragindex", help="ingest documentation and build a retrieval index")
    p.add_argument("docs_dir")
    p.add_argument("out_dir")
    p.add_argument("--version-tag", default="")
    p.set_defaults(fn=cmd_ragindex)

    p = sub.add_parser("ragquery", help="query a built retrieval index")
    p.add_argument("index_dir")
    p.add_argument("text")
    p.add_argument("-k", type=int, default=5)
    p.set_defaults(fn=cmd_ragquery)

    p = sub.add_parser("metrics", help="classify script operations and tabulate")
    p.add_argument("inputs", nargs="+", help="script files or session directories")
    p.add_argument("--without", nargs="*", default=[], help="paired no-retrieval inputs")
    p.add_argument("--patterns", help="NDJSON pattern file (defaults to the shipped rules)")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("replay", help="re-run a recorded session and verify zero divergence")
    common(p)
    p.add_argument("session_dir")
    p.add_argument("--out-dir", help="where the replayed session is written")
    p.set_defaults(fn=cmd_replay)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
