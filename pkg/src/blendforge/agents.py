"""The six agent roles: prompt templates, tool contracts, and response parsers.

Five roles are model-backed (planner, retrieval, coding, critic, verification);
the user proxy never calls a model, it only relays human input. Parsers are
deliberately lenient line grammars: anything that does not parse gets one
automatic re-prompt with a format reminder, then fails with a typed error.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import docrag
from .context import ContextBundle
from .gateway import ChatMessage, ChatRequest, ChatResponse, Gateway
from .types import (
    Critique,
    ExecutionError,
    ExecutionErrorKind,
    RenderSet,
    Role,
    Subtask,
    VerificationItem,
    VerificationStatus,
)

TEMPLATES_DIR = Path(__file__).parent / "templates"

PLAN_TERMINATOR = "COMPLETE"
APPROVAL_TOKEN = "NO ISSUES"

EXECUTE_CODE_TOOL = {
    "name": "execute_code_tool",
    "description": "Execute a complete Blender bpy script in the session scene.",
    "parameters": {
        "type": "object",
        "properties": {"code": {"type": "string", "description": "the full script source"}},
        "required": ["code"],
    },
}
RETRIEVE_INFORMATION_TOOL = {
    "name": "retrieve_information_tool",
    "description": "Query the documentation knowledge base.",
    "parameters": {
        "type": "object",
        "properties": {"query": {"type": "string"}},
        "required": ["query"],
    },
}
CRITIQUE_SCENE_TOOL = {
    "name": "critique_scene_tool",
    "description": "Render the scene and list visual problems against the target prompt.",
    "parameters": {
        "type": "object",
        "properties": {"target_prompt": {"type": "string"}},
        "required": ["target_prompt"],
    },
}
VERIFY_SCENE_TOOL = {
    "name": "verify_scene_tool",
    "description": "Re-render the scene and judge whether each critique was addressed.",
    "parameters": {"type": "object", "properties": {}, "required": []},
}


class AgentParseError(Exception):
    pass


class PlannerParseError(AgentParseError):
    pass


class CodingParseError(AgentParseError):
    pass


class CriticParseError(AgentParseError):
    pass


class VerifierParseError(AgentParseError):
    pass


class RetrievalUnavailableError(Exception):
    """The documentation index is missing or empty; retrieval cannot run."""


@dataclass
class AgentSpec:
    role: Role
    system_prompt: str
    tools: list[dict[str, Any]] = field(default_factory=list)
    binding_key: str | None = None  # None only for the user proxy


def render_template(template: str, mapping: dict[str, str]) -> str:
    """Exact-string placeholder substitution, no escaping."""
    out = template
    for key, value in mapping.items():
        out = out.replace("{" + key + "}", value)
    return out


def load_template(name: str) -> str:
    return (TEMPLATES_DIR / f"{name}.txt").read_text(encoding="utf-8")


def default_agents() -> dict[Role, AgentSpec]:
    return {
        Role.PLANNER: AgentSpec(Role.PLANNER, load_template("planner"), [], "planner"),
        Role.RETRIEVAL: AgentSpec(
            Role.RETRIEVAL, load_template("retrieval"), [RETRIEVE_INFORMATION_TOOL], "retrieval"
        ),
        Role.CODING: AgentSpec(Role.CODING, load_template("coding"), [EXECUTE_CODE_TOOL], "coding"),
        Role.CRITIC: AgentSpec(Role.CRITIC, load_template("critic"), [CRITIQUE_SCENE_TOOL], "critic"),
        Role.VERIFICATION: AgentSpec(
            Role.VERIFICATION, load_template("verification"), [VERIFY_SCENE_TOOL], "verification"
        ),
        Role.USER: AgentSpec(Role.USER, "", [], None),
    }


# -- planner --------------------------------------------------------------------

_PLAN_LINE = re.compile(r"^\s*(\w+)\s*:\s*(.+)$")

_AGENT_NAMES = {
    "planner_agent": Role.PLANNER,
    "planner": Role.PLANNER,
    "retrieval_agent": Role.RETRIEVAL,
    "retrieval": Role.RETRIEVAL,
    "coding_agent": Role.CODING,
    "coding": Role.CODING,
    "code_agent": Role.CODING,
    "critic_agent": Role.CRITIC,
    "critic": Role.CRITIC,
    "verification_agent": Role.VERIFICATION,
    "verification": Role.VERIFICATION,
    "user_proxy_agent": Role.USER,
    "user_agent": Role.USER,
}


@dataclass
class PlannerOutput:
    entries: list[tuple[Role, str]]
    complete: bool


def parse_plan(text: str) -> PlannerOutput:
    """Lines of the form ``<agent>:<task>`` with a known agent name become
    entries; everything else is ignored. The terminator is an exact,
    case-sensitive whitespace-delimited token."""
    entries = []
    for line in text.splitlines():
        match = _PLAN_LINE.match(line)
        if not match:
            continue
        role = _AGENT_NAMES.get(match.group(1).lower())
        if role is None:
            continue
        task = match.group(2).strip()
        if task:
            entries.append((role, task))
    complete = any(token == PLAN_TERMINATOR for token in text.split())
    return PlannerOutput(entries=entries, complete=complete)


def plan(goal: str, gateway: Gateway, spec: AgentSpec, model: str = "") -> list[Subtask]:
    """Decompose the goal into ordered subtasks via the planner."""
    if not goal:
        raise ValueError("goal must be non-empty")

    def ask(extra: str | None) -> PlannerOutput:
        messages = [
            ChatMessage("system", spec.system_prompt),
            ChatMessage("user", f"Task: {goal}"),
        ]
        if extra:
            messages.append(ChatMessage("user", extra))
        response = gateway.complete(
            ChatRequest(agent_role=spec.role.value, messages=messages, tools=spec.tools, model=model)
        )
        return parse_plan(response.text or "")

    output = ask(None)
    usable = [(r, t) for r, t in output.entries if r in (Role.RETRIEVAL, Role.CODING)]
    if not usable:
        output = ask(
            "Your previous reply contained no task lines. Reply only with lines in the form "
            "<agent>:<task> using agent names retrieval_agent or coding_agent, then COMPLETE."
        )
        usable = [(r, t) for r, t in output.entries if r in (Role.RETRIEVAL, Role.CODING)]
    if not usable:
        raise PlannerParseError("planner produced no parseable <agent>:<task> lines")
    return [Subtask(index=i, description=task) for i, (_, task) in enumerate(usable, start=1)]


# -- coding ----------------------------------------------------------------------

_FENCE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)


def extract_code(response: ChatResponse) -> str | None:
    """The script from a structured tool call, else the first fenced block."""
    for call in response.tool_calls:
        if call.name == EXECUTE_CODE_TOOL["name"] and isinstance(call.arguments.get("code"), str):
            return call.arguments["code"]
    if response.text:
        match = _FENCE.search(response.text)
        if match:
            return match.group(1)
    return None


def code_step(
    context: ContextBundle,
    instruction: str,
    gateway: Gateway,
    spec: AgentSpec,
    model: str = "",
) -> str:
    """Ask the coder for the complete script implementing ``instruction``."""
    if not instruction:
        raise ValueError("instruction must be non-empty")

    def ask(extra: str | None) -> ChatResponse:
        messages = [
            ChatMessage("system", spec.system_prompt),
            ChatMessage("user", context.render() + "\n\n" + instruction),
        ]
        if extra:
            messages.append(ChatMessage("user", extra))
        return gateway.complete(
            ChatRequest(agent_role=spec.role.value, messages=messages, tools=spec.tools, model=model)
        )

    response = ask(None)
    source = extract_code(response)
    if source is None:
        response = ask(
            "Your previous reply contained no code. Call execute_code_tool with the complete "
            "script as the code argument, or reply with one fenced code block."
        )
        source = extract_code(response)
    if source is None:
        raise CodingParseError("coder returned no tool call and no fenced code block")
    return source


# -- retrieval --------------------------------------------------------------------

class QueryKind:
    TASK_INTENT = "TaskIntent"
    ERROR_MESSAGE = "ErrorMessage"


def retrieve_and_summarize(
    query: str,
    kind: str,
    index: docrag.RetrievalIndex | None,
    gateway: Gateway,
    spec: AgentSpec,
    model: str = "",
    k: int = 5,
    error: ExecutionError | None = None,
) -> docrag.RetrievalSummary:
    """Look up documentation for a subtask or an execution error and condense it."""
    if not query:
        raise ValueError("query must be non-empty")
    if index is None or index.n_docs == 0:
        raise RetrievalUnavailableError("documentation index is empty or missing")

    boostable = (
        kind == QueryKind.ERROR_MESSAGE
        and error is not None
        and error.kind is ExecutionErrorKind.SCRIPT_EXCEPTION
    )
    if boostable:
        hits = index.error_query(error, k=k)
    else:
        # infrastructure failures (crash, timeout) are not documentation
        # problems; fall back to a plain lookup on the message
        hits = index.query(query, k=k)

    excerpt_parts = []
    for chunk_id, _score in hits:
        chunk = index.chunk_by_id(chunk_id)
        excerpt_parts.append(f"## {chunk.title} ({chunk_id})\n{chunk.body}")
    excerpts = "\n\n".join(excerpt_parts) if excerpt_parts else "(no matching documentation)"

    response = gateway.complete(
        ChatRequest(
            agent_role=spec.role.value,
            messages=[
                ChatMessage("system", spec.system_prompt),
                ChatMessage(
                    "user",
                    f"Query ({kind}): {query}\n\nRetrieved documentation:\n{excerpts}",
                ),
            ],
            tools=spec.tools,
            model=model,
        )
    )
    return docrag.RetrievalSummary(
        query=query, top_chunks=hits, summary_text=response.text or ""
    )


# -- critic -----------------------------------------------------------------------

_CRITIQUE_LINE = re.compile(
    r"^\s*(\d+)[.)]\s*problem\s*:\s*(.+?)\s*\|\s*fix\s*:\s*(.+?)\s*$", re.IGNORECASE
)


def parse_critiques(text: str) -> list[Critique] | None:
    """None means unparseable; an empty list means explicit approval."""
    if APPROVAL_TOKEN in text:
        return []
    items = []
    for line in text.splitlines():
        match = _CRITIQUE_LINE.match(line)
        if match:
            items.append(
                Critique(
                    index=len(items) + 1,
                    problem=match.group(2),
                    suggested_fix=match.group(3),
                )
            )
    return items or None


def critique(
    renders: RenderSet,
    goal: str,
    gateway: Gateway,
    spec: AgentSpec,
    model: str = "",
) -> list[Critique]:
    """Ask the vision critic for visual problems; an empty list is approval."""
    if renders.view_count < 1:
        raise ValueError("at least one rendered view is required")
    system = render_template(spec.system_prompt, {"goal": goal})
    attachments = [v.image_path for v in renders.views]

    def ask(extra: str | None) -> list[Critique] | None:
        messages = [
            ChatMessage("system", system),
            ChatMessage(
                "user",
                f"Critique the scene against the target prompt: {goal}",
                attachments=attachments,
            ),
        ]
        if extra:
            messages.append(ChatMessage("user", extra))
        response = gateway.complete(
            ChatRequest(agent_role=spec.role.value, messages=messages, tools=spec.tools, model=model)
        )
        return parse_critiques(response.text or "")

    items = ask(None)
    if items is None:
        items = ask(
            "Your previous reply was not in the required format. Use one line per problem: "
            "'1. problem: ... | fix: ...', or reply NO ISSUES."
        )
    if items is None:
        raise CriticParseError("critic reply had no parseable items and no approval token")
    return items


# -- verification -------------------------------------------------------------------

_VERIFY_LINE = re.compile(r"^\s*(\d+)[.)]\s*(RESOLVED|PARTIAL|UNRESOLVED)\b\s*:?\s*(.*?)\s*$")

_STATUS = {
    "RESOLVED": VerificationStatus.RESOLVED,
    "PARTIAL": VerificationStatus.PARTIAL,
    "UNRESOLVED": VerificationStatus.UNRESOLVED,
}


def parse_verification(text: str, critiques: list[Critique]) -> list[VerificationItem] | None:
    """One parsed status line per critique, in order; None on a count mismatch."""
    parsed = []
    for line in text.splitlines():
        match = _VERIFY_LINE.match(line)
        if match:
            parsed.append((_STATUS[match.group(2)], match.group(3) or None))
    if len(parsed) != len(critiques):
        return None
    items = []
    for critique_item, (status, followup) in zip(critiques, parsed):
        if status is not VerificationStatus.RESOLVED and not followup:
            followup = f"revisit: {critique_item.suggested_fix}"
        items.append(
            VerificationItem(
                critique_index=critique_item.index,
                status=status,
                followup_instruction=followup if status is not VerificationStatus.RESOLVED else None,
            )
        )
    return items


def verify(
    before: RenderSet,
    after: RenderSet,
    critiques: list[Critique],
    gateway: Gateway,
    spec: AgentSpec,
    model: str = "",
) -> list[VerificationItem]:
    """Judge each critique against before/after renders; one item per critique."""
    if not critiques:
        raise ValueError("verification requires at least one critique")
    critique_lines = "\n".join(
        f"{c.index}. problem: {c.problem} | fix: {c.suggested_fix}" for c in critiques
    )
    system = render_template(spec.system_prompt, {"critiques": critique_lines})
    attachments = [v.image_path for v in before.views] + [v.image_path for v in after.views]

    def ask(extra: str | None) -> list[VerificationItem] | None:
        messages = [
            ChatMessage("system", system),
            ChatMessage(
                "user",
                "The first images are the previous renders, the rest are the newest renders. "
                "Judge each critique.",
                attachments=attachments,
            ),
        ]
        if extra:
            messages.append(ChatMessage("user", extra))
        response = gateway.complete(
            ChatRequest(agent_role=spec.role.value, messages=messages, tools=spec.tools, model=model)
        )
        return parse_verification(response.text or "", critiques)

    items = ask(None)
    if items is None:
        items = ask(
            f"Your previous reply did not contain exactly {len(critiques)} status lines. "
            "Answer with one numbered RESOLVED/PARTIAL/UNRESOLVED line per critique, in order."
        )
    if items is None:
        raise VerifierParseError(
            f"verifier did not produce one status line per critique ({len(critiques)} expected)"
        )
    return items
