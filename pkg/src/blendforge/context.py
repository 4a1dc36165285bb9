"""Shared-context projection handed to agents before each turn.

Every agent sees the same session context: the goal, the subtask plan, the
full latest script verbatim, whatever critique and verification items are
still open, and a tail of recent activity. When the rendered bundle exceeds
the token budget, old activity lines are dropped first; the goal and the
latest code are never dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .types import (
    Critique,
    Event,
    EventKind,
    SessionState,
    VerificationStatus,
)

CODE_HEADER = "----- current code (version {version}) -----"
CODE_FOOTER = "----- end code -----"


class ContextError(Exception):
    pass


@dataclass
class ContextBundle:
    role: str
    goal: str
    subtask_lines: list[str]
    latest_code: str | None
    latest_code_version: int | None
    open_critiques: list[Critique]
    open_followups: list[tuple[int, str]]
    recent_activity: list[str] = field(default_factory=list)

    def render(self) -> str:
        parts = [f"Goal: {self.goal}"]
        if self.subtask_lines:
            parts.append("Subtasks:\n" + "\n".join(self.subtask_lines))
        if self.latest_code is not None:
            parts.append(
                CODE_HEADER.format(version=self.latest_code_version)
                + "\n"
                + self.latest_code
                + "\n"
                + CODE_FOOTER
            )
        if self.open_critiques:
            lines = [
                f"{c.index}. problem: {c.problem} | fix: {c.suggested_fix}" for c in self.open_critiques
            ]
            parts.append("Open critiques:\n" + "\n".join(lines))
        if self.open_followups:
            lines = [f"{idx}. {text}" for idx, text in self.open_followups]
            parts.append("Pending fix instructions:\n" + "\n".join(lines))
        if self.recent_activity:
            parts.append("Recent activity:\n" + "\n".join(self.recent_activity))
        return "\n\n".join(parts)


def _event_line(event: Event) -> str:
    payload = event.payload
    kind = event.kind
    if kind is EventKind.CODE_EXECUTED:
        status = "ok" if payload.get("ok") else f"error ({payload.get('error', {}).get('kind')})"
        return f"[{event.actor}] executed v{payload.get('version')}: {status}"
    if kind is EventKind.RENDER_PRODUCED:
        rs = payload.get("render_set", {})
        return f"[{event.actor}] rendered {rs.get('render_set_id')} ({rs.get('view_count')} views)"
    if kind is EventKind.TURN_ENDED:
        role = payload.get("role", event.actor)
        if "subtasks" in payload:
            return f"[{role}] planned {len(payload['subtasks'])} subtasks"
        if "critique_round" in payload:
            n = len(payload["critique_round"].get("items", []))
            return f"[{role}] critique round {payload['critique_round'].get('round')}: {n} items"
        if "verification_round" in payload:
            vr = payload["verification_round"]
            return f"[{role}] verification round {vr.get('round')}: all_resolved={vr.get('all_resolved')}"
        if "refinement" in payload:
            return f"[{role}] requested: {payload['refinement'].get('text')}"
        return f"[{role}] finished turn"
    if kind is EventKind.PHASE_CHANGED:
        return f"[{event.actor}] phase changed to {payload.get('to')}"
    if kind is EventKind.ERROR:
        return f"[{event.actor}] error: {payload.get('message')}"
    if kind is EventKind.TERMINATED:
        return f"[{event.actor}] session terminated"
    return f"[{event.actor}] {kind.value}"


def _open_items(state: SessionState) -> tuple[list[Critique], list[tuple[int, str]]]:
    if not state.critiques:
        return [], []
    latest_round = state.critiques[-1]
    if latest_round.approved:
        return [], []
    verification = state.verifications[-1] if state.verifications else None
    if verification is None:
        return list(latest_round.items), []
    if verification.all_resolved:
        return [], []
    resolved = {
        item.critique_index
        for item in verification.items
        if item.status is VerificationStatus.RESOLVED
    }
    open_critiques = [c for c in latest_round.items if c.index not in resolved]
    followups = [
        (item.critique_index, f"({item.status.value}) {item.followup_instruction}")
        for item in verification.items
        if item.status is not VerificationStatus.RESOLVED
    ]
    return open_critiques, followups


def assemble_context(
    state: SessionState,
    for_role: str,
    recent_events: int | None = None,
    token_budget: int | None = None,
) -> ContextBundle:
    """Project the session into the bundle an agent sees.

    The latest code artifact appears exactly once, byte-identical to the
    stored source. Activity summaries never inline script bodies, so the
    source cannot leak into the bundle a second time.
    """
    if state.phase.terminal:
        raise ContextError(f"session is {state.phase.value}; no context to assemble")

    recent = recent_events if recent_events is not None else state.config.context_recent_events
    budget = token_budget if token_budget is not None else state.config.context_token_budget

    latest = state.latest_code
    subtask_lines = [f"{s.index}. [{s.status.value}] {s.description}" for s in state.subtasks]
    open_critiques, followups = _open_items(state)
    activity = [_event_line(e) for e in state.event_log[-recent:]] if recent > 0 else []

    bundle = ContextBundle(
        role=for_role,
        goal=state.goal,
        subtask_lines=subtask_lines,
        latest_code=latest.source if latest else None,
        latest_code_version=latest.version if latest else None,
        open_critiques=open_critiques,
        open_followups=followups,
        recent_activity=activity,
    )

    # Rough 4-chars-per-token budget; drop oldest activity lines first.
    while bundle.recent_activity and len(bundle.render()) > budget * 4:
        bundle.recent_activity.pop(0)
    return bundle
