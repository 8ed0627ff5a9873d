"""Knowledge base data model: documents of named chunks, diffs, and the patch function.

A knowledge base state is an immutable snapshot of every document. Edits are
expressed as per-document diffs (ordered chunk operations) pooled into a
single `KBEdit`; applying an edit produces a brand new state and never mutates
the input. States are content-addressed by a fingerprint of their canonical
serialization so that search code can dedupe and persist them.
"""

from __future__ import annotations

import difflib
import hashlib
import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DuplicateDocId, IdMismatch, NameCollision, TargetMissing

__all__ = [
    "Chunk",
    "Document",
    "KBState",
    "EditChunk",
    "AddChunk",
    "DeleteChunk",
    "ChunkOp",
    "DocumentDiff",
    "KBEdit",
    "ChunkPolicy",
    "chunk_document",
    "apply_edit",
    "diff_documents",
    "state_fingerprint",
    "load_kb_dir",
    "write_kb_dir",
    "EMPTY_KB_FINGERPRINT",
    "NONE_FILE",
    "slugify",
]

# Selection target meaning "the fix belongs in a brand-new document".
NONE_FILE = "None"

TEXT_SUFFIXES = {".md", ".markdown", ".txt", ".rst", ".text", ""}
MARKDOWN_SUFFIXES = {".md", ".markdown"}

_HEADING_RE = re.compile(r"^#{1,6}\s+(?P<title>.+?)\s*$")


@dataclass(frozen=True)
class Chunk:
    """A named span of text inside a document.

    `origin` is provenance metadata (was the chunk part of the original KB,
    added by an actor, or edited by one). It is deliberately excluded from
    equality and fingerprints: two states with the same names and texts are
    the same state.
    """

    name: str
    text: str
    origin: str = "original"  # original | added | edited

    def __post_init__(self):
        if not self.name:
            raise ValueError("chunk name must be non-empty")

    def __eq__(self, other):
        if not isinstance(other, Chunk):
            return NotImplemented
        return self.name == other.name and self.text == other.text

    def __hash__(self):
        return hash((self.name, self.text))


@dataclass(frozen=True)
class Document:
    """An ordered sequence of uniquely named chunks."""

    id: str
    chunks: tuple[Chunk, ...]

    def __post_init__(self):
        object.__setattr__(self, "chunks", tuple(self.chunks))
        names = [c.name for c in self.chunks]
        if len(names) != len(set(names)):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise NameCollision(f"duplicate chunk names in {self.id!r}: {dupes}")

    @property
    def text(self) -> str:
        return "".join(c.text for c in self.chunks)

    def chunk_names(self) -> list[str]:
        return [c.name for c in self.chunks]

    def find(self, name: str) -> Chunk | None:
        for c in self.chunks:
            if c.name == name:
                return c
        return None


@dataclass(frozen=True)
class KBState:
    """Immutable snapshot of the whole knowledge base, content-addressed.

    Documents are kept sorted by id so iteration order, serialization, and
    fingerprints are independent of construction order.
    """

    docs: tuple[Document, ...]

    def __post_init__(self):
        docs = tuple(sorted(self.docs, key=lambda d: d.id))
        ids = [d.id for d in docs]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise NameCollision(f"duplicate document ids: {dupes}")
        object.__setattr__(self, "docs", docs)

    @classmethod
    def from_documents(cls, documents: Iterable[Document]) -> "KBState":
        return cls(docs=tuple(documents))

    @cached_property
    def documents(self) -> Mapping[str, Document]:
        return {d.id: d for d in self.docs}

    @cached_property
    def fingerprint(self) -> str:
        return state_fingerprint(self)

    def doc(self, doc_id: str) -> Document:
        try:
            return self.documents[doc_id]
        except KeyError:
            raise TargetMissing(f"no such document: {doc_id!r}") from None

    def __eq__(self, other):
        if not isinstance(other, KBState):
            return NotImplemented
        return self.fingerprint == other.fingerprint

    def __hash__(self):
        return hash(self.fingerprint)


# --- chunk operations ---------------------------------------------------------


@dataclass(frozen=True)
class EditChunk:
    """Replace the text of an existing chunk."""

    target: str
    new_text: str

    kind = "edit"


@dataclass(frozen=True)
class AddChunk:
    """Insert a new chunk after `insert_after`, or at the top when None."""

    name: str
    text: str
    insert_after: str | None = None

    kind = "add"


@dataclass(frozen=True)
class DeleteChunk:
    """Remove an existing chunk."""

    target: str

    kind = "delete"


ChunkOp = EditChunk | AddChunk | DeleteChunk


@dataclass(frozen=True)
class DocumentDiff:
    """Ordered chunk ops against one document.

    `creates_document` marks diffs that materialize a brand-new document
    (the "None" pseudo-file route); the diff is then applied to an empty
    document with `doc_id`.
    """

    doc_id: str
    ops: tuple[ChunkOp, ...] = ()
    creates_document: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))

    @property
    def is_identity(self) -> bool:
        return not self.ops and not self.creates_document


@dataclass(frozen=True)
class KBEdit:
    """Pooled per-document diffs: the action applied by the search."""

    diffs: tuple[DocumentDiff, ...] = ()

    def __post_init__(self):
        diffs = tuple(self.diffs)
        ids = [d.doc_id for d in diffs]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DuplicateDocId(f"multiple diffs for: {dupes}")
        object.__setattr__(self, "diffs", diffs)

    @property
    def is_empty(self) -> bool:
        return all(d.is_identity for d in self.diffs)


# --- chunking -----------------------------------------------------------------


@dataclass(frozen=True)
class ChunkPolicy:
    """How raw document text is cut into editable chunks.

    Markdown files are cut at heading boundaries so actors can address
    sections by name; oversized sections and plain files fall back to
    fixed line windows.
    """

    lines_per_chunk: int = 50
    markdown_headings: bool = True

    def __post_init__(self):
        if self.lines_per_chunk <= 0:
            raise ValueError("lines_per_chunk must be positive")


DEFAULT_POLICY = ChunkPolicy()


def _window_names(n: int, start: int = 1) -> list[str]:
    return [f"part-{i:04d}" for i in range(start, start + n)]


def _windows(lines: list[str], size: int) -> list[str]:
    return ["".join(lines[i : i + size]) for i in range(0, len(lines), size)]


def _dedupe_name(name: str, taken: set[str]) -> str:
    candidate = name
    k = 2
    while candidate in taken:
        candidate = f"{name} ({k})"
        k += 1
    taken.add(candidate)
    return candidate


def _chunk_plain(lines: list[str], policy: ChunkPolicy) -> list[Chunk]:
    texts = _windows(lines, policy.lines_per_chunk) or [""]
    return [Chunk(name, text) for name, text in zip(_window_names(len(texts)), texts)]


def _chunk_markdown(lines: list[str], policy: ChunkPolicy) -> list[Chunk]:
    # Split into (title, lines) sections at heading lines; the heading line
    # stays inside its own section so the join remains lossless.
    sections: list[tuple[str | None, list[str]]] = []
    current: list[str] = []
    title: str | None = None
    for line in lines:
        m = _HEADING_RE.match(line.rstrip("\n"))
        if m:
            if current or title is not None:
                sections.append((title, current))
            title = m.group("title")
            current = [line]
        else:
            current.append(line)
    sections.append((title, current))

    if all(t is None for t, _ in sections):
        return _chunk_plain(lines, policy)

    taken: set[str] = set()
    chunks: list[Chunk] = []
    for title, sec_lines in sections:
        base = title if title is not None else "(preamble)"
        if not sec_lines:
            continue
        windows = _windows(sec_lines, policy.lines_per_chunk)
        for i, text in enumerate(windows):
            name = base if i == 0 else f"{base} (cont. {i + 1})"
            chunks.append(Chunk(_dedupe_name(name, taken), text))
    return chunks or [Chunk("part-0001", "")]


def chunk_document(doc_id: str, raw_text: str, policy: ChunkPolicy = DEFAULT_POLICY) -> Document:
    """Cut `raw_text` into chunks; joining the chunk texts reproduces it exactly.

    Empty text yields a single empty chunk so every document is addressable.
    """
    lines = raw_text.splitlines(keepends=True)
    suffix = Path(doc_id).suffix.lower()
    if policy.markdown_headings and suffix in MARKDOWN_SUFFIXES:
        chunks = _chunk_markdown(lines, policy)
    else:
        chunks = _chunk_plain(lines, policy)
    doc = Document(id=doc_id, chunks=tuple(chunks))
    assert doc.text == raw_text, "chunking must be lossless"
    return doc


# --- patch function (state transition) -----------------------------------------


def _apply_op(doc_id: str, chunks: list[Chunk], op: ChunkOp) -> list[Chunk]:
    index = {c.name: i for i, c in enumerate(chunks)}
    if isinstance(op, EditChunk):
        if op.target not in index:
            raise TargetMissing(f"{doc_id!r} has no chunk {op.target!r}")
        i = index[op.target]
        out = list(chunks)
        out[i] = Chunk(op.target, op.new_text, origin="edited")
        return out
    if isinstance(op, AddChunk):
        if op.name in index:
            raise NameCollision(f"{doc_id!r} already has chunk {op.name!r}")
        if op.insert_after is None:
            pos = 0
        else:
            if op.insert_after not in index:
                raise TargetMissing(f"{doc_id!r} has no chunk {op.insert_after!r}")
            pos = index[op.insert_after] + 1
        out = list(chunks)
        out.insert(pos, Chunk(op.name, op.text, origin="added"))
        return out
    if isinstance(op, DeleteChunk):
        if op.target not in index:
            raise TargetMissing(f"{doc_id!r} has no chunk {op.target!r}")
        return [c for c in chunks if c.name != op.target]
    raise TypeError(f"unknown op: {op!r}")


def apply_ops(doc: Document, ops: Iterable[ChunkOp]) -> Document:
    """Apply chunk ops to one document, returning a new document."""
    chunks = list(doc.chunks)
    for op in ops:
        chunks = _apply_op(doc.id, chunks, op)
    return Document(id=doc.id, chunks=tuple(chunks))


def _apply_diff(doc: Document, diff: DocumentDiff) -> Document:
    return apply_ops(doc, diff.ops)


def apply_edit(state: KBState, edit: KBEdit) -> KBState:
    """Patch `state` with `edit`, returning a new state.

    The whole edit applies atomically: any bad op (missing target, name
    collision) raises before a new state exists, and the input state is
    never touched.
    """
    docs = dict(state.documents)
    for diff in edit.diffs:
        if diff.creates_document:
            if diff.doc_id in docs:
                raise NameCollision(f"document already exists: {diff.doc_id!r}")
            base = Document(id=diff.doc_id, chunks=())
        else:
            if diff.doc_id not in docs:
                raise TargetMissing(f"no such document: {diff.doc_id!r}")
            base = docs[diff.doc_id]
        docs[diff.doc_id] = _apply_diff(base, diff)
    return KBState.from_documents(docs.values())


def diff_documents(old: Document, new: Document) -> DocumentDiff:
    """Compute a chunk-op diff such that applying it to `old` yields `new`.

    Unchanged chunks that keep their relative order produce no ops. Chunks
    that moved are expressed as delete + re-add; name-stable chunks with new
    text become single edits.
    """
    if old.id != new.id:
        raise IdMismatch(f"{old.id!r} != {new.id!r}")

    old_names = old.chunk_names()
    new_names = new.chunk_names()

    # Stable backbone: a common subsequence of names; everything else moves.
    matcher = difflib.SequenceMatcher(a=old_names, b=new_names, autojunk=False)
    stable = set()
    for block in matcher.get_matching_blocks():
        stable.update(old_names[block.a : block.a + block.size])

    ops: list[ChunkOp] = []
    for name in old_names:
        if name not in stable:
            ops.append(DeleteChunk(name))

    old_by_name = {c.name: c for c in old.chunks}
    prev: str | None = None
    for chunk in new.chunks:
        if chunk.name in stable:
            if old_by_name[chunk.name].text != chunk.text:
                ops.append(EditChunk(chunk.name, chunk.text))
        else:
            ops.append(AddChunk(chunk.name, chunk.text, insert_after=prev))
        prev = chunk.name

    return DocumentDiff(doc_id=old.id, ops=tuple(ops))


# --- fingerprints ---------------------------------------------------------------


def _canonical_bytes(state: KBState) -> bytes:
    def norm(text: str) -> str:
        return text.replace("\r\n", "\n").replace("\r", "\n")

    payload = [
        {"id": d.id, "chunks": [{"name": c.name, "text": norm(c.text)} for c in d.chunks]}
        for d in state.docs  # already sorted by id
    ]
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def state_fingerprint(state: KBState) -> str:
    """Content hash of the canonical serialization (LF-normalized, id-sorted)."""
    return hashlib.sha256(_canonical_bytes(state)).hexdigest()


# sha256 of the canonical serialization of a knowledge base with no documents.
EMPTY_KB_FINGERPRINT = "4f53cda18c2baa0c0354bb5f9a3ecbe5ed12ab4d8e11ba873c2f11161202b945"


def slugify(name: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-")
    return slug or "section"


# --- disk layout ------------------------------------------------------------------


def load_kb_dir(root: str | Path, policy: ChunkPolicy = DEFAULT_POLICY) -> KBState:
    """Load a directory tree of text/markdown files as a knowledge base state.

    Document ids are POSIX-style relative paths. Line endings are normalized
    to LF on the way in so fingerprints are platform-stable. Files that do
    not decode as UTF-8 are skipped (binary documents are out of scope).
    """
    root = Path(root)
    docs: list[Document] = []
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        if path.suffix.lower() not in TEXT_SUFFIXES:
            continue
        try:
            text = path.read_text(encoding="utf-8")
        except UnicodeDecodeError:
            continue
        text = text.replace("\r\n", "\n").replace("\r", "\n")
        doc_id = path.relative_to(root).as_posix()
        docs.append(chunk_document(doc_id, text, policy))
    return KBState.from_documents(docs)


def write_kb_dir(state: KBState, root: str | Path) -> None:
    """Write a state as a browsable directory tree (one file per document)."""
    root = Path(root)
    for doc in state.docs:
        path = root / doc.id
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(doc.text, encoding="utf-8")


# --- json wire format for edits ------------------------------------------------


def op_to_json(op: ChunkOp) -> dict:
    if isinstance(op, EditChunk):
        return {"op": "edit", "target": op.target, "text": op.new_text}
    if isinstance(op, AddChunk):
        return {"op": "add", "name": op.name, "text": op.text, "insert_after": op.insert_after}
    if isinstance(op, DeleteChunk):
        return {"op": "delete", "target": op.target}
    raise TypeError(f"unknown op: {op!r}")


def op_from_json(data: Mapping) -> ChunkOp:
    kind = data["op"]
    if kind == "edit":
        return EditChunk(data["target"], data["text"])
    if kind == "add":
        return AddChunk(data["name"], data["text"], data.get("insert_after"))
    if kind == "delete":
        return DeleteChunk(data["target"])
    raise ValueError(f"unknown op kind: {kind!r}")


def edit_to_json(edit: KBEdit) -> dict:
    return {
        "diffs": [
            {
                "doc_id": d.doc_id,
                "creates_document": d.creates_document,
                "ops": [op_to_json(op) for op in d.ops],
            }
            for d in edit.diffs
        ]
    }


def edit_from_json(data: Mapping) -> KBEdit:
    return KBEdit(
        diffs=tuple(
            DocumentDiff(
                doc_id=d["doc_id"],
                ops=tuple(op_from_json(o) for o in d["ops"]),
                creates_document=d.get("creates_document", False),
            )
            for d in data["diffs"]
        )
    )
