"""Documentation retrieval: ingest HTML/text docs, chunk, index, query.

Chunking contract: a file's extracted text is split at headings into sections;
a section longer than ``max_chunk_chars`` is wrapped at paragraph boundaries
with a fixed character overlap, so concatenating a file's chunks (skipping the
overlap on continuation chunks) reproduces the extracted text exactly.

Scoring is BM25 (k1=1.2, b=0.75) with bag-of-tokens queries: a token that
appears twice in the query bag contributes twice. Tokens are lowercased words
split on non-alphanumerics, plus whole dotted API paths (``bpy.ops.mesh`` is
indexed both split and whole).

Index directory layout::

    chunks.ndjson   one DocChunk per line, in corpus order
    postings.bin    little-endian binary, see _write_postings for the layout
    meta.json       scoring parameters, version tag, corpus statistics
"""

from __future__ import annotations

import json
import logging
import math
import re
import struct
from dataclasses import dataclass
from html.parser import HTMLParser
from pathlib import Path
from typing import Any

from .types import ExecutionError, ExecutionErrorKind

log = logging.getLogger(__name__)

DEFAULT_MAX_CHUNK_CHARS = 2000
DEFAULT_OVERLAP_CHARS = 200


class DocRagError(Exception):
    pass


class IngestError(DocRagError):
    pass


class PreconditionError(DocRagError):
    pass


@dataclass
class DocChunk:
    chunk_id: str
    source_file: str
    title: str
    body: str
    version_tag: str = ""

    def __post_init__(self) -> None:
        if not self.body:
            raise DocRagError("chunk body must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "chunk_id": self.chunk_id,
            "source_file": self.source_file,
            "title": self.title,
            "body": self.body,
            "version_tag": self.version_tag,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DocChunk":
        return cls(**{k: d[k] for k in ("chunk_id", "source_file", "title", "body", "version_tag")})


@dataclass
class RetrievalSummary:
    query: str
    top_chunks: list[tuple[str, float]]
    summary_text: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "query": self.query,
            "top_chunks": [[cid, score] for cid, score in self.top_chunks],
            "summary_text": self.summary_text,
        }


# -- extraction --------------------------------------------------------------

_HEADINGS = {"h1", "h2", "h3", "h4", "h5", "h6"}
_SKIP = {"script", "style", "head"}
_BLOCK_BREAK = {"p", "div", "li", "tr", "section", "article", "ul", "ol", "table", "blockquote", "dd", "dt"}


class _TextExtractor(HTMLParser):
    """Flattens HTML to text, remembering where each heading starts."""

    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.parts: list[str] = []
        self.length = 0
        self.headings: list[tuple[int, str]] = []  # (offset into text, title)
        self._skip_depth = 0
        self._pre_depth = 0
        self._heading_tag: str | None = None
        self._heading_start = 0
        self._heading_text: list[str] = []

    def _emit(self, text: str) -> None:
        if text:
            self.parts.append(text)
            self.length += len(text)

    def handle_starttag(self, tag: str, attrs: list) -> None:
        if tag in _SKIP:
            self._skip_depth += 1
            return
        if self._skip_depth:
            return
        if tag in ("pre", "code"):
            self._pre_depth += 1
        if tag in _HEADINGS:
            if self.parts and not self.parts[-1].endswith("\n"):
                self._emit("\n")
            self._heading_tag = tag
            self._heading_start = self.length
            self._heading_text = []
        elif tag == "br":
            self._emit("\n")

    def handle_endtag(self, tag: str) -> None:
        if tag in _SKIP:
            self._skip_depth = max(0, self._skip_depth - 1)
            return
        if self._skip_depth:
            return
        if tag in ("pre", "code"):
            self._pre_depth = max(0, self._pre_depth - 1)
        if tag in _HEADINGS and tag == self._heading_tag:
            title = " ".join("".join(self._heading_text).split())
            self.headings.append((self._heading_start, title))
            self._heading_tag = None
            self._emit("\n")
        elif tag in _BLOCK_BREAK:
            if self.parts and not self.parts[-1].endswith("\n\n"):
                self._emit("\n" if self.parts[-1].endswith("\n") else "\n\n")

    def handle_data(self, data: str) -> None:
        if self._skip_depth:
            return
        if self._pre_depth:
            text = data  # code blocks verbatim
        else:
            text = re.sub(r"\s+", " ", data)
            if text == " " and (not self.parts or self.parts[-1].endswith(("\n", " "))):
                return
        if self._heading_tag:
            self._heading_text.append(text)
        self._emit(text)

    def result(self) -> tuple[str, list[tuple[int, str]]]:
        return "".join(self.parts), self.headings


def extract_text(raw: str, is_html: bool) -> tuple[str, list[tuple[int, str]]]:
    if not is_html:
        return raw, []
    parser = _TextExtractor()
    parser.feed(raw)
    parser.close()
    return parser.result()


# -- chunking ----------------------------------------------------------------

def _wrap_section(text: str, max_chars: int, overlap: int) -> list[tuple[str, bool]]:
    """Split one section into (piece, is_continuation) with a fixed overlap.

    A continuation piece starts exactly ``overlap`` characters before the end
    of the previous piece; boundaries prefer the last paragraph break inside
    the window when one exists far enough in to keep making progress.
    """
    if len(text) <= max_chars:
        return [(text, False)]
    pieces: list[tuple[str, bool]] = []
    start = 0
    while start < len(text):
        if len(text) - start <= max_chars:
            pieces.append((text[start:], start > 0))
            break
        window = text[start : start + max_chars]
        cut = window.rfind("\n\n")
        end = start + (cut + 2 if cut > overlap else max_chars)
        pieces.append((text[start:end], start > 0))
        start = end - overlap
    return pieces


def _chunk_file(
    rel_path: str,
    text: str,
    headings: list[tuple[int, str]],
    version_tag: str,
    max_chars: int,
    overlap: int,
) -> list[DocChunk]:
    sections: list[tuple[str, str]] = []
    if not headings:
        sections.append((Path(rel_path).stem, text))
    else:
        first_offset = headings[0][0]
        if text[:first_offset].strip():
            sections.append((Path(rel_path).stem, text[:first_offset]))
        elif first_offset:
            # keep leading whitespace attached to the first section for exact reconstruction
            headings = [(0, headings[0][1])] + headings[1:]
        for i, (offset, title) in enumerate(headings):
            end = headings[i + 1][0] if i + 1 < len(headings) else len(text)
            sections.append((title, text[offset:end]))

    chunks: list[DocChunk] = []
    for section_index, (title, body) in enumerate(sections):
        if not body:
            continue
        for piece_index, (piece, _cont) in enumerate(_wrap_section(body, max_chars, overlap)):
            chunks.append(
                DocChunk(
                    chunk_id=f"{rel_path}:{section_index:03d}:{piece_index:03d}",
                    source_file=rel_path,
                    title=title,
                    body=piece,
                    version_tag=version_tag,
                )
            )
    return chunks


def reconstruct_file(chunks: list[DocChunk], overlap: int = DEFAULT_OVERLAP_CHARS) -> str:
    """Invert chunking for one file's chunks (given in corpus order)."""
    out: list[str] = []
    for chunk in chunks:
        piece_index = int(chunk.chunk_id.rsplit(":", 1)[1])
        out.append(chunk.body[overlap:] if piece_index > 0 else chunk.body)
    return "".join(out)


def ingest(
    docs_dir: str | Path,
    version_tag: str = "",
    max_chunk_chars: int = DEFAULT_MAX_CHUNK_CHARS,
    overlap_chars: int = DEFAULT_OVERLAP_CHARS,
) -> list[DocChunk]:
    """Walk a documentation tree and produce the deterministic chunk list."""
    root = Path(docs_dir)
    if not root.is_dir():
        raise IngestError(f"not a directory: {root}")
    chunks: list[DocChunk] = []
    for path in sorted(root.rglob("*")):
        if not path.is_file() or path.suffix.lower() not in (".html", ".htm", ".txt", ".md", ".rst"):
            continue
        rel = path.relative_to(root).as_posix()
        try:
            raw = path.read_text(encoding="utf-8", errors="strict")
        except (OSError, UnicodeDecodeError) as exc:
            log.warning("skipping unreadable file %s: %s", rel, exc)
            continue
        text, headings = extract_text(raw, is_html=path.suffix.lower() in (".html", ".htm"))
        chunks.extend(_chunk_file(rel, text, headings, version_tag, max_chunk_chars, overlap_chars))
    if not chunks:
        raise IngestError(f"no documentation chunks found under {root}")
    return chunks


# -- tokenization and index ----------------------------------------------------

_WORD = re.compile(r"[a-z0-9]+")
_DOTTED = re.compile(r"[a-z_][a-z0-9_]*(?:\.[a-z_][a-z0-9_]*)+")


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens plus whole dotted API paths as extra tokens."""
    lower = text.lower()
    tokens = _WORD.findall(lower)
    tokens.extend(_DOTTED.findall(lower))
    return tokens


@dataclass
class RetrievalIndex:
    """Lexical index. The method surface (query, error_query, chunk_by_id,
    n_docs) is the whole retrieval contract: an embedding-based backend can
    slot in by offering the same four members."""

    chunks: list[DocChunk]
    postings: dict[str, list[tuple[int, int]]]  # term -> [(chunk ordinal, tf)]
    doc_lengths: list[int]
    avg_dl: float
    k1: float = 1.2
    b: float = 0.75
    version_tag: str = ""

    @property
    def n_docs(self) -> int:
        return len(self.chunks)

    def chunk_by_id(self, chunk_id: str) -> DocChunk:
        for chunk in self.chunks:
            if chunk.chunk_id == chunk_id:
                return chunk
        raise KeyError(chunk_id)

    def query(self, text: str, k: int = 5) -> list[tuple[str, float]]:
        return query(self, text, k=k)

    def error_query(self, error: ExecutionError, k: int = 5) -> list[tuple[str, float]]:
        return error_query(self, error, k=k)


def build_index(
    chunks: list[DocChunk], k1: float = 1.2, b: float = 0.75, version_tag: str | None = None
) -> RetrievalIndex:
    if not chunks:
        raise DocRagError("cannot build an index over zero chunks")
    postings: dict[str, list[tuple[int, int]]] = {}
    doc_lengths: list[int] = []
    for ordinal, chunk in enumerate(chunks):
        tokens = tokenize(chunk.body)
        doc_lengths.append(len(tokens))
        tfs: dict[str, int] = {}
        for token in tokens:
            tfs[token] = tfs.get(token, 0) + 1
        for token, tf in tfs.items():
            postings.setdefault(token, []).append((ordinal, tf))
    avg_dl = sum(doc_lengths) / len(doc_lengths)
    tag = version_tag if version_tag is not None else (chunks[0].version_tag if chunks else "")
    return RetrievalIndex(
        chunks=list(chunks),
        postings=postings,
        doc_lengths=doc_lengths,
        avg_dl=avg_dl,
        k1=k1,
        b=b,
        version_tag=tag,
    )


def _score_bag(index: RetrievalIndex, bag: list[str]) -> dict[int, float]:
    scores: dict[int, float] = {}
    n = index.n_docs
    for token in bag:
        plist = index.postings.get(token)
        if not plist:
            continue
        df = len(plist)
        idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
        for ordinal, tf in plist:
            dl = index.doc_lengths[ordinal]
            denom = tf + index.k1 * (1.0 - index.b + index.b * dl / index.avg_dl)
            scores[ordinal] = scores.get(ordinal, 0.0) + idf * tf * (index.k1 + 1.0) / denom
    return scores


def _ranked(index: RetrievalIndex, scores: dict[int, float], k: int) -> list[tuple[str, float]]:
    items = [
        (index.chunks[ordinal].chunk_id, score) for ordinal, score in scores.items() if score > 0.0
    ]
    items.sort(key=lambda pair: (-pair[1], pair[0]))
    return items[:k]


def query(index: RetrievalIndex, text: str, k: int = 5) -> list[tuple[str, float]]:
    if not text:
        raise PreconditionError("query text must be non-empty")
    if k < 1:
        raise PreconditionError("k must be >= 1")
    return _ranked(index, _score_bag(index, tokenize(text)), k)


_QUOTED = re.compile(r"\"([^\"\n]+)\"|'([^'\n]+)'")


def error_query(index: RetrievalIndex, error: ExecutionError, k: int = 5) -> list[tuple[str, float]]:
    """Rank chunks against a script error.

    The query bag is the error message plus the last three traceback lines;
    identifiers quoted in the error are tripled in the bag so the renamed /
    missing name dominates generic words.
    """
    if error.kind is not ExecutionErrorKind.SCRIPT_EXCEPTION:
        raise PreconditionError(
            f"error kind {error.kind.value} is not a documentation problem"
        )
    tail_lines = [ln for ln in (error.traceback or "").splitlines() if ln.strip()][-3:]
    query_text = "\n".join([error.message, *tail_lines])
    bag = tokenize(query_text)
    for match in _QUOTED.finditer(query_text):
        quoted = match.group(1) or match.group(2)
        bag.extend(tokenize(quoted) * 2)  # x3 total with the base occurrence
    if not bag:
        raise PreconditionError("error text produced no query tokens")
    return _ranked(index, _score_bag(index, bag), k)


# -- persistence ---------------------------------------------------------------

_MAGIC = b"BFIX"
_FORMAT_VERSION = 1


def save_index(index: RetrievalIndex, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "chunks.ndjson", "w", encoding="utf-8") as f:
        for chunk in index.chunks:
            f.write(json.dumps(chunk.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    _write_postings(index, out / "postings.bin")
    meta = {
        "k1": index.k1,
        "b": index.b,
        "version_tag": index.version_tag,
        "n_docs": index.n_docs,
        "avg_dl": index.avg_dl,
        "doc_lengths": index.doc_lengths,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def _write_postings(index: RetrievalIndex, path: Path) -> None:
    """Layout (all little-endian): magic, u32 format version, u32 term count;
    per term: u16 utf-8 length, term bytes, u32 run count, then runs of
    (u32 chunk ordinal, u32 term frequency). Terms are sorted for determinism."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _FORMAT_VERSION))
        terms = sorted(index.postings)
        f.write(struct.pack("<I", len(terms)))
        for term in terms:
            raw = term.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            runs = index.postings[term]
            f.write(struct.pack("<I", len(runs)))
            for ordinal, tf in runs:
                f.write(struct.pack("<II", ordinal, tf))


def load_index(index_dir: str | Path) -> RetrievalIndex:
    root = Path(index_dir)
    chunks = []
    with open(root / "chunks.ndjson", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                chunks.append(DocChunk.from_dict(json.loads(line)))
    meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    postings: dict[str, list[tuple[int, int]]] = {}
    with open(root / "postings.bin", "rb") as f:
        if f.read(4) != _MAGIC:
            raise DocRagError("postings.bin: bad magic")
        (fmt,) = struct.unpack("<I", f.read(4))
        if fmt != _FORMAT_VERSION:
            raise DocRagError(f"postings.bin: unsupported format version {fmt}")
        (term_count,) = struct.unpack("<I", f.read(4))
        for _ in range(term_count):
            (term_len,) = struct.unpack("<H", f.read(2))
            term = f.read(term_len).decode("utf-8")
            (run_count,) = struct.unpack("<I", f.read(4))
            runs = []
            for _ in range(run_count):
                ordinal, tf = struct.unpack("<II", f.read(8))
                runs.append((ordinal, tf))
            postings[term] = runs
    return RetrievalIndex(
        chunks=chunks,
        postings=postings,
        doc_lengths=meta["doc_lengths"],
        avg_dl=meta["avg_dl"],
        k1=meta["k1"],
        b=meta["b"],
        version_tag=meta.get("version_tag", ""),
    )
