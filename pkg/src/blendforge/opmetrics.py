"""Code-sophistication and error-rate measurement over generated scripts.

A small lexical scanner finds dotted call chains that are invoked or assigned
into, canonicalizes them (argument lists stripped, subscripts normalized to
``[...]``, local-variable roots replaced by ``*``, imported-module roots kept),
and a rule file classifies each canonical call as Simple or Complex. Counts
are of unique identifiers per class. Session logs additionally contribute an
error count: every failed execution event is one error.

The scanner is intentionally lexical, not an AST walk: it must shrug at
half-broken model output. Comments and string literals are never scanned;
f-string interiors are treated as opaque strings.
"""

from __future__ import annotations

import csv
import io
import json
import keyword
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

log = logging.getLogger(__name__)

DEFAULT_PATTERNS_PATH = Path(__file__).parent / "data" / "op_patterns.ndjson"

TABLE_COLUMNS = [
    "name",
    "complex_with_rag",
    "complex_without_rag",
    "errors_with_rag",
    "errors_without_rag",
]


class MetricsError(Exception):
    pass


class PatternConfigError(MetricsError):
    pass


@dataclass
class OpPattern:
    pattern: str
    cls: str  # "Simple" | "Complex"
    match: str = "substring"  # "prefix" | "substring" | "suffix"
    rationale: str = ""

    def __post_init__(self) -> None:
        if not self.pattern:
            raise PatternConfigError("pattern must be non-empty")
        if self.cls not in ("Simple", "Complex"):
            raise PatternConfigError(f"unknown class {self.cls!r}")
        if self.match not in ("prefix", "substring", "suffix"):
            raise PatternConfigError(f"unknown match kind {self.match!r}")

    def matches(self, call: str) -> bool:
        if self.match == "prefix":
            return call.startswith(self.pattern)
        if self.match == "suffix":
            return call.endswith(self.pattern)
        return self.pattern in call


@dataclass
class ScriptReport:
    script_id: str
    simple_ops: set[str] = field(default_factory=set)
    complex_ops: set[str] = field(default_factory=set)
    unmatched_calls: set[str] = field(default_factory=set)
    error_count: int | None = None


def load_patterns(path: str | Path | None = None) -> list[OpPattern]:
    path = Path(path) if path else DEFAULT_PATTERNS_PATH
    patterns = []
    seen: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            pattern = OpPattern(
                pattern=d["pattern"],
                cls=d["cls"],
                match=d.get("match", "substring"),
                rationale=d.get("rationale", ""),
            )
            previous = seen.get(pattern.pattern)
            if previous is not None and previous != pattern.cls:
                raise PatternConfigError(
                    f"pattern {pattern.pattern!r} appears as both {previous} and {pattern.cls}"
                )
            seen[pattern.pattern] = pattern.cls
            patterns.append(pattern)
    return patterns


# -- lexical call extraction -----------------------------------------------------

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_STRING_PREFIX = set("rbfuRBFU")
_AUG_OPS = ("+=", "-=", "*=", "/=", "//=", "%=", "**=", "&=", "|=", "^=", ">>=", "<<=")


def _lex(source: str) -> list[tuple[str, str]]:
    """Tokens: NAME, DOT, LPAR, RPAR, LBRACK, RBRACK, EQ, AUG, STR, OP."""
    tokens: list[tuple[str, str]] = []
    i, n = 0, len(source)
    while i < n:
        ch = source[i]
        if ch in " \t\r\n\\":
            i += 1
            continue
        if ch == "#":
            while i < n and source[i] != "\n":
                i += 1
            continue
        if ch in "\"'":
            i = _skip_string(source, i)
            tokens.append(("STR", ""))
            continue
        if ch.isalpha() or ch == "_":
            match = _NAME_RE.match(source, i)
            assert match is not None
            name = match.group(0)
            # a string prefix like r"..." or f'...'
            if set(name) <= _STRING_PREFIX and match.end() < n and source[match.end()] in "\"'":
                i = _skip_string(source, match.end())
                tokens.append(("STR", ""))
                continue
            tokens.append(("NAME", name))
            i = match.end()
            continue
        if ch == ".":
            tokens.append(("DOT", "."))
            i += 1
            continue
        if ch in "([{":
            tokens.append(({"(": "LPAR", "[": "LBRACK", "{": "LBRACE"}[ch], ch))
            i += 1
            continue
        if ch in ")]}":
            tokens.append(({")": "RPAR", "]": "RBRACK", "}": "RBRACE"}[ch], ch))
            i += 1
            continue
        three, two = source[i : i + 3], source[i : i + 2]
        if three in _AUG_OPS:
            tokens.append(("AUG", three))
            i += 3
            continue
        if two in _AUG_OPS:
            tokens.append(("AUG", two))
            i += 2
            continue
        if two in ("==", "<=", ">=", "!=", ":="):
            tokens.append(("OP", two))
            i += 2
            continue
        if ch == "=":
            tokens.append(("EQ", "="))
            i += 1
            continue
        tokens.append(("OP", ch))
        i += 1
    return tokens


def _skip_string(source: str, start: int) -> int:
    quote = source[start]
    n = len(source)
    if source[start : start + 3] in (quote * 3,):
        closing = quote * 3
        i = start + 3
        while i < n:
            if source[i] == "\\":
                i += 2
                continue
            if source.startswith(closing, i):
                return i + 3
            i += 1
        return n
    i = start + 1
    while i < n:
        if source[i] == "\\":
            i += 2
            continue
        if source[i] == quote or source[i] == "\n":
            return i + 1
        i += 1
    return n


def _imported_modules(tokens: list[tuple[str, str]]) -> dict[str, str]:
    """Map local binding name -> module path for plain ``import`` statements.

    ``from X import name`` bindings are deliberately ignored: those names look
    like locals at use sites, and the canonicalizer treats them as such."""
    aliases: dict[str, str] = {}
    in_from = False
    i = 0
    while i < len(tokens):
        kind, value = tokens[i]
        if kind == "NAME" and value == "from":
            in_from = True
            i += 1
            continue
        if kind == "NAME" and value == "import" and in_from:
            in_from = False
            i += 1
            continue
        if kind == "NAME" and value == "import":
            i += 1
            while i < len(tokens):
                parts = []
                while i < len(tokens) and tokens[i][0] == "NAME" and not keyword.iskeyword(tokens[i][1]):
                    parts.append(tokens[i][1])
                    if i + 1 < len(tokens) and tokens[i + 1][0] == "DOT":
                        i += 2
                    else:
                        i += 1
                        break
                if not parts:
                    break
                module = ".".join(parts)
                binding = parts[0]
                if i < len(tokens) and tokens[i] == ("NAME", "as"):
                    i += 1
                    if i < len(tokens) and tokens[i][0] == "NAME":
                        binding = tokens[i][1]
                        module = ".".join(parts)
                        i += 1
                aliases[binding] = module if binding != parts[0] else parts[0]
                if i < len(tokens) and tokens[i] == ("OP", ","):
                    i += 1
                    continue
                break
        else:
            i += 1
    return aliases


def _skip_balanced(tokens: list[tuple[str, str]], i: int, open_kind: str, close_kind: str) -> int:
    depth = 0
    while i < len(tokens):
        kind = tokens[i][0]
        if kind == open_kind:
            depth += 1
        elif kind == close_kind:
            depth -= 1
            if depth == 0:
                return i + 1
        i += 1
    return i


def extract_calls(source: str) -> set[str]:
    """Canonical identifiers of every dotted chain that is invoked or assigned into."""
    tokens = _lex(source)
    aliases = _imported_modules(tokens)
    calls: set[str] = set()
    depth = 0
    i = 0
    while i < len(tokens):
        kind, value = tokens[i]
        if kind in ("LPAR", "LBRACK", "LBRACE"):
            depth += 1
            i += 1
            continue
        if kind in ("RPAR", "RBRACK", "RBRACE"):
            depth = max(0, depth - 1)
            i += 1
            continue
        if kind != "NAME" or keyword.iskeyword(value):
            i += 1
            continue
        prev = tokens[i - 1] if i > 0 else ("", "")
        if prev[0] == "DOT" or prev[1] in ("def", "class", "import", "from", "as"):
            i += 1
            continue

        # walk the chain: NAME (.NAME | [..])*
        parts = [value]
        j = i + 1
        while j < len(tokens):
            if tokens[j][0] == "DOT" and j + 1 < len(tokens) and tokens[j + 1][0] == "NAME":
                parts.append(tokens[j + 1][1])
                j += 2
            elif tokens[j][0] == "LBRACK":
                parts.append("[...]")
                j = _skip_balanced(tokens, j, "LBRACK", "RBRACK")
            else:
                break

        invoked = j < len(tokens) and tokens[j][0] == "LPAR"
        assigned = (
            j < len(tokens) and tokens[j][0] in ("EQ", "AUG") and depth == 0
        )
        if invoked or assigned:
            root = parts[0]
            dotted = len(parts) > 1
            if root in aliases:
                canonical_root = aliases[root]
            elif dotted:
                canonical_root = "*"
            else:
                canonical_root = None  # bare local call, not an API identifier
            if canonical_root is not None:
                canonical = canonical_root
                for part in parts[1:]:
                    canonical += part if part == "[...]" else "." + part
                calls.add(canonical)
        i = j if j > i else i + 1
    return calls


# -- classification ----------------------------------------------------------------

def classify(calls: Iterable[str], patterns: list[OpPattern], script_id: str = "") -> ScriptReport:
    """Longest matching pattern wins; unmatched calls are reported, not counted."""
    report = ScriptReport(script_id=script_id)
    for call in calls:
        candidates = [p for p in patterns if p.matches(call)]
        if not candidates:
            report.unmatched_calls.add(call)
            continue
        best = max(candidates, key=lambda p: (len(p.pattern), p.match == "prefix", p.pattern))
        if best.cls == "Simple":
            report.simple_ops.add(call)
        else:
            report.complex_ops.add(call)
    return report


_JUDGE_PROMPT = """\
You classify Blender Python API calls into two classes.
Simple operations are one-line or commonly used API calls: switching object \
modes, adding primitives, appending materials, setting vertex groups, basic \
transforms. Complex operations need multi-step logic: bmesh editing, shader \
node construction, geometry node setups, writing node socket values, direct \
vertex data manipulation.
Reply with exactly two lines:
SIMPLE: <comma-separated calls or none>
COMPLEX: <comma-separated calls or none>
"""


def classify_with_model(calls: Iterable[str], gateway, model: str = "", script_id: str = "") -> ScriptReport:
    """Model-judged classification, for parity experiments against the rule file.

    Same report shape as ``classify``; not part of the measured pipeline.
    """
    from .gateway import ChatMessage, ChatRequest

    report = ScriptReport(script_id=script_id)
    ordered = sorted(calls)
    if not ordered:
        return report
    response = gateway.complete(
        ChatRequest(
            agent_role="judge",
            messages=[
                ChatMessage("system", _JUDGE_PROMPT),
                ChatMessage("user", "Calls:\n" + "\n".join(ordered)),
            ],
            model=model,
        )
    )
    listed: set[str] = set()
    for line in (response.text or "").splitlines():
        upper = line.strip()
        for prefix, bucket in (("SIMPLE:", report.simple_ops), ("COMPLEX:", report.complex_ops)):
            if upper.upper().startswith(prefix):
                for item in upper[len(prefix):].split(","):
                    name = item.strip()
                    if name and name.lower() != "none" and name in ordered:
                        bucket.add(name)
                        listed.add(name)
    report.unmatched_calls = set(ordered) - listed
    report.complex_ops -= report.simple_ops  # disjointness wins over a confused judge
    return report


# -- aggregation ---------------------------------------------------------------------

@dataclass
class MetricsRow:
    name: str
    complex_with_rag: int | None = None
    complex_without_rag: int | None = None
    errors_with_rag: int | None = None
    errors_without_rag: int | None = None

    def values(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "complex_with_rag": self.complex_with_rag,
            "complex_without_rag": self.complex_without_rag,
            "errors_with_rag": self.errors_with_rag,
            "errors_without_rag": self.errors_without_rag,
        }


@dataclass
class MetricsTable:
    rows: list[MetricsRow] = field(default_factory=list)
    averages: MetricsRow | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(TABLE_COLUMNS)
        for row in [*self.rows, *( [self.averages] if self.averages else [] )]:
            values = row.values()
            writer.writerow(["" if values[c] is None else values[c] for c in TABLE_COLUMNS])
        return buf.getvalue()

    def to_text(self) -> str:
        header = TABLE_COLUMNS
        all_rows = [*self.rows, *([self.averages] if self.averages else [])]
        cells = [
            [("-" if row.values()[c] is None else str(row.values()[c])) for c in header]
            for row in all_rows
        ]
        widths = [max(len(h), *(len(r[k]) for r in cells)) if cells else len(h)
                  for k, h in enumerate(header)]
        lines = ["  ".join(h.ljust(widths[k]) for k, h in enumerate(header))]
        for row_cells in cells:
            lines.append("  ".join(c.ljust(widths[k]) for k, c in enumerate(row_cells)))
        return "\n".join(lines)


def _read_input(path: Path, patterns: list[OpPattern]) -> tuple[int, int | None]:
    """Return (unique complex count, error count or None) for a script or session dir."""
    if path.is_dir():
        events_path = path / "events.ndjson"
        if not events_path.exists():
            raise MetricsError(f"{path} is a directory without events.ndjson")
        errors = 0
        latest_source: str | None = None
        with open(events_path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                event = json.loads(line)
                if event.get("kind") == "CodeExecuted":
                    if not event["payload"].get("ok", False):
                        errors += 1
                    latest_source = event["payload"].get("source", latest_source)
        if latest_source is None:
            raise MetricsError(f"session {path} has no executed code")
        report = classify(extract_calls(latest_source), patterns)
        return len(report.complex_ops), errors
    source = path.read_text(encoding="utf-8")
    report = classify(extract_calls(source), patterns)
    return len(report.complex_ops), None


def aggregate(
    with_rag: list[str | Path],
    without_rag: list[str | Path] | None = None,
    names: list[str] | None = None,
    patterns: list[OpPattern] | None = None,
) -> MetricsTable:
    """Build the per-object table; ``without_rag`` inputs pair by position."""
    patterns = patterns or load_patterns()
    without_rag = without_rag or []
    table = MetricsTable()
    for i, item in enumerate(with_rag):
        path = Path(item)
        name = names[i] if names and i < len(names) else path.stem
        row = MetricsRow(name=name)
        try:
            row.complex_with_rag, row.errors_with_rag = _read_input(path, patterns)
        except (OSError, MetricsError) as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        if i < len(without_rag):
            try:
                row.complex_without_rag, row.errors_without_rag = _read_input(
                    Path(without_rag[i]), patterns
                )
            except (OSError, MetricsError) as exc:
                log.warning("skipping counterpart %s: %s", without_rag[i], exc)
        table.rows.append(row)

    if table.rows:
        def mean(values: list[int | None]) -> float | None:
            present = [v for v in values if v is not None]
            return round(sum(present) / len(present), 2) if present else None

        table.averages = MetricsRow(
            name="Avg",
            complex_with_rag=mean([r.complex_with_rag for r in table.rows]),
            complex_without_rag=mean([r.complex_without_rag for r in table.rows]),
            errors_with_rag=mean([r.errors_with_rag for r in table.rows]),
            errors_without_rag=mean([r.errors_without_rag for r in table.rows]),
        )
    return table


# -- timing ------------------------------------------------------------------------

@dataclass
class TimingReport:
    phase_durations: dict[str, float] = field(default_factory=dict)
    edit_durations: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def edit_mean(self) -> float | None:
        return sum(self.edit_durations) / len(self.edit_durations) if self.edit_durations else None


def phase_timing(session_dir: str | Path) -> TimingReport:
    """Durations between phase boundaries plus per-refinement edit spans."""
    events_path = Path(session_dir) / "events.ndjson"
    events = []
    with open(events_path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                events.append(json.loads(line))

    report = TimingReport()
    boundaries: dict[str, float] = {}
    for event in events:
        if event["kind"] == "PhaseChanged":
            boundaries.setdefault(event["payload"]["to"], event["timestamp"])
        elif event["kind"] == "Terminated":
            boundaries.setdefault("Terminated", event["timestamp"])

    spans = [("InitialCreation", "AutoRefine"), ("AutoRefine", "UserRefine")]
    for start_phase, end_phase in spans:
        if start_phase in boundaries and end_phase in boundaries:
            report.phase_durations[start_phase] = boundaries[end_phase] - boundaries[start_phase]
        elif start_phase in boundaries:
            report.warnings.append(f"no boundary closing phase {start_phase}")

    start_ts: float | None = None
    for event in events:
        payload = event.get("payload", {})
        if (
            event["kind"] == "TurnEnded"
            and payload.get("role") == "user"
            and "refinement" in payload
            and not payload["refinement"].get("terminator")
        ):
            if start_ts is not None:
                report.warnings.append("refinement span without a closing verification")
            start_ts = event["timestamp"]
        elif start_ts is not None and (
            (
                event["kind"] == "TurnEnded"
                and payload.get("role") == "verification"
                and payload.get("verification_round", {}).get("all_resolved")
            )
            or (event["kind"] == "Error" and payload.get("warning"))
        ):
            report.edit_durations.append(event["timestamp"] - start_ts)
            start_ts = None
    if start_ts is not None:
        report.warnings.append("refinement span without a closing verification")
    return report
