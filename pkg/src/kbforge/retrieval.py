"""Embedding-based semantic retrieval with token-budget enforcement.

Retrieval chunks are a second layer over the editable document chunks: whole
documents are packed into windows of at most `max_chunk_tokens` tokens (7500
by default, leaving headroom under the embedding input limit), embedded once
per state fingerprint, and ranked by exact cosine similarity. Results are
truncated from the bottom of the ranking until they fit the token budget.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmbeddingProviderError, KBForgeError
from .gateway import Gateway
from .kb import Document, KBState
from .tokens import DEFAULT_TOKENIZER_ID, TokenCounter, counter_for, heuristic_token_count

DEFAULT_MAX_CHUNK_TOKENS = 7500
DEFAULT_TOKEN_BUDGET = 18000


@dataclass(frozen=True)
class RetrievalChunk:
    doc_id: str
    span: tuple[str, str]  # first and last document-chunk name covered
    seq: int  # position of this retrieval chunk within its document
    text: str
    token_count: int


@dataclass(frozen=True)
class ScoredChunk:
    chunk: RetrievalChunk
    score: float


@dataclass(frozen=True)
class RetrievalSet:
    entries: tuple[ScoredChunk, ...]
    total_tokens: int

    def doc_ids(self) -> list[str]:
        seen: list[str] = []
        for e in self.entries:
            if e.chunk.doc_id not in seen:
                seen.append(e.chunk.doc_id)
        return seen


@dataclass
class Index:
    fingerprint: str
    chunks: list[RetrievalChunk]
    vectors: np.ndarray  # unit rows, shape (len(chunks), dimension)
    dimension: int
    tokenizer_id: str
    embed_fn: object  # Callable[[list[str]], np.ndarray]; not serialized

    def __len__(self) -> int:
        return len(self.chunks)


def _split_oversized(text: str, max_tokens: int, counter: TokenCounter) -> list[str]:
    """Split one oversized piece of text into windows of <= max_tokens each.

    Prefers line boundaries; a single line longer than the window is
    hard-split by characters.
    """
    pieces: list[str] = []
    current = ""
    for line in text.splitlines(keepends=True) or [""]:
        if counter(line) > max_tokens:
            if current:
                pieces.append(current)
                current = ""
            start = 0
            while start < len(line):
                # Grow a character window until the next char would overflow.
                lo, hi = 1, len(line) - start
                while lo < hi:
                    mid = (lo + hi + 1) // 2
                    if counter(line[start : start + mid]) <= max_tokens:
                        lo = mid
                    else:
                        hi = mid - 1
                pieces.append(line[start : start + lo])
                start += lo
            continue
        if current and counter(current + line) > max_tokens:
            pieces.append(current)
            current = line
        else:
            current += line
    if current or not pieces:
        pieces.append(current)
    return pieces


def retrieval_chunks_for(doc: Document, max_tokens: int, counter: TokenCounter) -> list[RetrievalChunk]:
    """Pack a document's chunks into retrieval windows covering every byte once."""
    windows: list[tuple[str, str, str]] = []  # (start_name, end_name, text)
    cur_text = ""
    cur_span: tuple[str, str] | None = None
    for chunk in doc.chunks:
        if counter(chunk.text) > max_tokens:
            if cur_span is not None:
                windows.append((cur_span[0], cur_span[1], cur_text))
                cur_text, cur_span = "", None
            for piece in _split_oversized(chunk.text, max_tokens, counter):
                windows.append((chunk.name, chunk.name, piece))
            continue
        if cur_span is None:
            cur_text, cur_span = chunk.text, (chunk.name, chunk.name)
        elif counter(cur_text + chunk.text) > max_tokens:
            windows.append((cur_span[0], cur_span[1], cur_text))
            cur_text, cur_span = chunk.text, (chunk.name, chunk.name)
        else:
            cur_text += chunk.text
            cur_span = (cur_span[0], chunk.name)
    if cur_span is not None:
        windows.append((cur_span[0], cur_span[1], cur_text))
    if not windows and doc.chunks:
        windows = [(doc.chunks[0].name, doc.chunks[-1].name, doc.text)]
    return [
        RetrievalChunk(doc.id, (start, end), seq, text, counter(text))
        for seq, (start, end, text) in enumerate(windows)
    ]


def build_index(state: KBState, gateway: Gateway,
                max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS,
                tokenizer_id: str = DEFAULT_TOKENIZER_ID,
                parallelism: int = 1, batch_size: int = 64) -> Index:
    if max_chunk_tokens <= 0:
        raise ValueError("max_chunk_tokens must be positive")
    counter = counter_for(tokenizer_id)
    chunks: list[RetrievalChunk] = []
    for doc in state.docs:
        chunks.extend(retrieval_chunks_for(doc, max_chunk_tokens, counter))

    texts = [c.text for c in chunks]
    batches = [texts[i : i + batch_size] for i in range(0, len(texts), batch_size)]

    def embed_batch(batch_idx: int) -> np.ndarray:
        batch = batches[batch_idx]
        try:
            return np.asarray(gateway.embed(batch), dtype=np.float32)
        except KBForgeError as exc:
            first = chunks[batch_idx * batch_size]
            raise EmbeddingProviderError(
                f"embedding failed near {first.doc_id}[{first.span[0]}..{first.span[1]}]: {exc}"
            ) from exc

    if batches:
        if parallelism > 1:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                parts = list(pool.map(embed_batch, range(len(batches))))
        else:
            parts = [embed_batch(i) for i in range(len(batches))]
        vectors = np.vstack(parts)
    else:
        vectors = np.empty((0, getattr(gateway.profile, "dimension", 0)), dtype=np.float32)

    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    vectors = vectors / norms
    dimension = vectors.shape[1] if vectors.size else getattr(gateway.profile, "dimension", 0)
    return Index(
        fingerprint=state.fingerprint,
        chunks=chunks,
        vectors=vectors,
        dimension=dimension,
        tokenizer_id=tokenizer_id,
        embed_fn=gateway.embed,
    )


def _rank(index: Index, query_text: str) -> list[ScoredChunk]:
    if not index.chunks:
        return []
    qvec = np.asarray(index.embed_fn([query_text]), dtype=np.float32)[0]
    norm = float(np.linalg.norm(qvec))
    if norm > 0:
        qvec = qvec / norm
    scores = index.vectors @ qvec
    order = sorted(
        range(len(index.chunks)),
        key=lambda i: (-float(scores[i]), index.chunks[i].doc_id, index.chunks[i].span, index.chunks[i].seq),
    )
    return [ScoredChunk(index.chunks[i], float(scores[i])) for i in order]


def _truncate(ranked: list[ScoredChunk], budget: int) -> RetrievalSet:
    kept: list[ScoredChunk] = []
    total = 0
    for entry in ranked:
        if total + entry.chunk.token_count > budget:
            break
        kept.append(entry)
        total += entry.chunk.token_count
    return RetrievalSet(entries=tuple(kept), total_tokens=total)


def retrieve(query: str, index: Index, budget: int = DEFAULT_TOKEN_BUDGET) -> RetrievalSet:
    """Rank every chunk by cosine similarity and keep the top prefix within budget."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    return _truncate(_rank(index, query), budget)


def iterative_retrieve(query: str, index: Index, draft_answer: str,
                       budget: int = DEFAULT_TOKEN_BUDGET) -> RetrievalSet:
    """Second retrieval pass over query plus a draft answer (used for code tasks)."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    return _truncate(_rank(index, f"{query}\n\n{draft_answer}"), budget)


class IndexCache:
    """Rebuild-per-state index cache keyed by fingerprint.

    Re-asking for a known fingerprint reuses the index and makes zero new
    embedding calls.
    """

    def __init__(self, gateway: Gateway, max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS,
                 tokenizer_id: str = DEFAULT_TOKENIZER_ID, parallelism: int = 1):
        self.gateway = gateway
        self.max_chunk_tokens = max_chunk_tokens
        self.tokenizer_id = tokenizer_id
        self.parallelism = parallelism
        self._cache: dict[str, Index] = {}

    def get_or_build(self, state: KBState) -> Index:
        fp = state.fingerprint
        if fp not in self._cache:
            self._cache[fp] = build_index(
                state,
                self.gateway,
                max_chunk_tokens=self.max_chunk_tokens,
                tokenizer_id=self.tokenizer_id,
                parallelism=self.parallelism,
            )
        return self._cache[fp]


def save_index(index: Index, directory: str | Path) -> None:
    """Persist vectors as flat little-endian float32 plus a JSON sidecar."""
    import json

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "vectors.f32").write_bytes(index.vectors.astype("<f4").tobytes())
    sidecar = {
        "fingerprint": index.fingerprint,
        "dimension": index.dimension,
        "tokenizer_id": index.tokenizer_id,
        "chunks": [
            {
                "doc_id": c.doc_id,
                "span": list(c.span),
                "seq": c.seq,
                "tokens": c.token_count,
                "text": c.text,
            }
            for c in index.chunks
        ],
    }
    (directory / "index.json").write_text(
        json.dumps(sidecar, sort_keys=True, ensure_ascii=False, indent=2) + "\n",
        encoding="utf-8",
    )


def load_index(directory: str | Path, gateway: Gateway) -> Index:
    import json

    directory = Path(directory)
    sidecar = json.loads((directory / "index.json").read_text(encoding="utf-8"))
    raw = (directory / "vectors.f32").read_bytes()
    dimension = sidecar["dimension"]
    vectors = np.frombuffer(raw, dtype="<f4").reshape(-1, dimension) if dimension else np.empty((0, 0), dtype=np.float32)
    chunks = [
        RetrievalChunk(c["doc_id"], (c["span"][0], c["span"][1]), c["seq"], c["text"], c["tokens"])
        for c in sidecar["chunks"]
    ]
    return Index(
        fingerprint=sidecar["fingerprint"],
        chunks=chunks,
        vectors=np.array(vectors, dtype=np.float32),
        dimension=dimension,
        tokenizer_id=sidecar["tokenizer_id"],
        embed_fn=gateway.embed,
    )
