"""Single gateway over chat-completion and embedding providers.

Every LLM touchpoint in the system goes through here, in one of four modes:

* live    - HTTP calls against a configured provider profile
* record  - live calls, with every (request, response) appended to a JSONL
            transcript keyed by a stable request hash
* replay  - answers requests from a transcript only; a miss is a hard error,
            which is what makes the test suite hermetic
* scripted - rule-based responses for tests (no transcript required)

Requests are hashed over (template id, rendered prompt, temperature, branch
tag). The branch tag is how the search asks for several distinct expansion
samples while keeping temperature at 0: replay/scripted modes key on it, and
live mode appends a nonce line per branch so providers actually vary.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContextOverflow,
    InputTooLong,
    MissingVariable,
    ProviderError,
    ReplayMiss,
)
from .tokens import TokenCounter, heuristic_token_count

try:  # optional at import time: only live mode needs it
    import requests
except ImportError:  # pragma: no cover
    requests = None


# --- provider profiles --------------------------------------------------------


@dataclass
class ProviderProfile:
    """Where and how to reach a chat-completions style provider."""

    name: str = "mock"
    base_url: str = ""
    chat_path: str = "/v1/chat/completions"
    embed_path: str = "/v1/embeddings"
    model: str = "mock-chat"
    embed_model: str = "mock-embed"
    api_key_env: str = "KBFORGE_API_KEY"
    dimension: int = 3072
    max_input_tokens: int = 8191
    max_context_tokens: int = 128_000
    timeout_s: float = 120.0

    @property
    def is_mock(self) -> bool:
        return self.name == "mock" or not self.base_url

    @classmethod
    def from_dict(cls, data: dict) -> "ProviderProfile":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


# --- requests/responses ---------------------------------------------------------


@dataclass(frozen=True)
class ChatRequest:
    template_id: str
    prompt: str
    temperature: float = 0.0
    max_tokens: int | None = None
    branch_tag: str = ""

    @property
    def request_hash(self) -> str:
        payload = json.dumps(
            {
                "template_id": self.template_id,
                "prompt": self.prompt,
                "temperature": self.temperature,
                "branch_tag": self.branch_tag,
            },
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage_tokens: int = 0
    latency_ms: float = 0.0
    provider: str = "mock"
    retry_count: int = 0


# --- template rendering -----------------------------------------------------------

_TEMPLATES_DIR = Path(__file__).parent / "templates"
_PLACEHOLDER_RE = re.compile(r"\{([a-z][a-z0-9_]*)\}")


def load_template(template_id: str) -> str:
    return (_TEMPLATES_DIR / f"{template_id}.txt").read_text(encoding="utf-8")


def render_template(template_id: str, variables: dict[str, str]) -> str:
    """Interpolate {name} placeholders in a single pass.

    Values are substituted verbatim (braces inside them are never escaped or
    re-scanned). An unbound placeholder raises MissingVariable with its name.
    """
    template = load_template(template_id)

    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in variables:
            raise MissingVariable(name)
        return str(variables[name])

    return _PLACEHOLDER_RE.sub(sub, template)


# --- embedders ---------------------------------------------------------------------


class MockEmbedder:
    """Deterministic, seeded hash-based embeddings for offline runs.

    Trailing whitespace is ignored so a second-pass query with an empty draft
    embeds identically to the bare query. A vector table can pin exact
    vectors for constructed fixtures; unlisted texts fall back to the hash.
    """

    def __init__(self, dimension: int = 64, seed: int = 0,
                 vector_table: dict[str, Sequence[float]] | None = None):
        self.dimension = dimension
        self.seed = seed
        self.vector_table = {k.rstrip(): np.asarray(v, dtype=np.float32)
                             for k, v in (vector_table or {}).items()}

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dimension), dtype=np.float32)
        for i, text in enumerate(texts):
            key = text.rstrip()
            if key in self.vector_table:
                vec = self.vector_table[key].astype(np.float32)
                if vec.shape != (self.dimension,):
                    raise ValueError("vector table dimension mismatch")
            else:
                digest = hashlib.sha256(f"{self.seed}:{key}".encode("utf-8")).digest()
                rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
                vec = rng.standard_normal(self.dimension).astype(np.float32)
            norm = float(np.linalg.norm(vec))
            out[i] = vec / norm if norm > 0 else vec
        return out


# --- gateway ------------------------------------------------------------------------


class Gateway:
    """Base interface; concrete gateways implement _complete / _embed."""

    profile: ProviderProfile

    def __init__(self, profile: ProviderProfile | None = None,
                 token_counter: TokenCounter = heuristic_token_count):
        self.profile = profile or ProviderProfile()
        self.token_counter = token_counter

    # -- chat --

    def complete(self, request: ChatRequest) -> ChatResponse:
        if self.token_counter(request.prompt) > self.profile.max_context_tokens:
            raise ContextOverflow(
                f"prompt of ~{self.token_counter(request.prompt)} tokens exceeds "
                f"context limit {self.profile.max_context_tokens}"
            )
        return self._complete(request)

    def _complete(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError

    # -- embeddings --

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        for t in texts:
            if self.token_counter(t) > self.profile.max_input_tokens:
                raise InputTooLong(
                    f"embedding input of ~{self.token_counter(t)} tokens exceeds "
                    f"limit {self.profile.max_input_tokens}"
                )
        return self._embed(list(texts))

    def _embed(self, texts: list[str]) -> np.ndarray:
        raise NotImplementedError


class LiveGateway(Gateway):
    """HTTP gateway speaking the common chat-completions wire format."""

    def __init__(self, profile: ProviderProfile, max_retries: int = 3,
                 backoff_s: float = 1.0,
                 embedder: Callable[[Sequence[str]], np.ndarray] | None = None, **kw):
        super().__init__(profile, **kw)
        if requests is None:  # pragma: no cover
            raise ProviderError("requests is not installed")
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self._embedder = embedder or (MockEmbedder(profile.dimension) if profile.is_mock else None)

    def _headers(self) -> dict:
        key = os.environ.get(self.profile.api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, path: str, payload: dict) -> dict:
        last: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                resp = requests.post(
                    self.profile.base_url.rstrip("/") + path,
                    json=payload,
                    headers=self._headers(),
                    timeout=self.profile.timeout_s,
                )
                if resp.status_code >= 500 or resp.status_code == 429:
                    raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                if resp.status_code >= 400:
                    raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                data = resp.json()
                data["_retry_count"] = attempt
                return data
            except (ProviderError, OSError, ValueError) as exc:
                last = exc
                if attempt + 1 < self.max_retries:
                    time.sleep(self.backoff_s * 2**attempt)
        raise ProviderError(f"provider failed after {self.max_retries} attempts: {last}")

    def _complete(self, request: ChatRequest) -> ChatResponse:
        prompt = request.prompt
        if request.branch_tag:
            # Distinct expansion samples at temperature 0: nudge the provider
            # with a visible variation nonce instead of raising temperature.
            prompt += f"\n\n(variation seed: {request.branch_tag})"
        start = time.monotonic()
        payload = {
            "model": self.profile.model,
            "temperature": request.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        if request.max_tokens:
            payload["max_tokens"] = request.max_tokens
        data = self._post(self.profile.chat_path, payload)
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed chat response: {exc}") from exc
        usage = (data.get("usage") or {}).get("total_tokens", 0)
        return ChatResponse(
            text=text,
            usage_tokens=usage,
            latency_ms=(time.monotonic() - start) * 1000,
            provider=self.profile.name,
            retry_count=data.get("_retry_count", 0),
        )

    def _embed(self, texts: list[str]) -> np.ndarray:
        if self._embedder is not None:
            return self._embedder(texts)
        data = self._post(self.profile.embed_path, {
            "model": self.profile.embed_model,
            "input": texts,
        })
        try:
            rows = [item["embedding"] for item in data["data"]]
        except (KeyError, TypeError) as exc:
            raise ProviderError(f"malformed embedding response: {exc}") from exc
        arr = np.asarray(rows, dtype=np.float32)
        if arr.shape != (len(texts), self.profile.dimension):
            raise ProviderError(
                f"embedding dimension {arr.shape} != expected {self.profile.dimension}"
            )
        return arr


class ScriptedGateway(Gateway):
    """Rule-based gateway for tests.

    Rules are (predicate, responder) pairs tried in order; the first matching
    predicate wins. Responders may be strings or callables of the request.
    A missing rule is an error so scripted scenarios stay airtight.
    """

    def __init__(self, profile: ProviderProfile | None = None,
                 embedder: Callable[[Sequence[str]], np.ndarray] | None = None, **kw):
        super().__init__(profile or ProviderProfile(name="mock", dimension=64), **kw)
        self.rules: list[tuple[Callable[[ChatRequest], bool], object]] = []
        self.calls: list[ChatRequest] = []
        self._embedder = embedder or MockEmbedder(self.profile.dimension)

    def add_rule(self, predicate: Callable[[ChatRequest], bool],
                 responder: str | Callable[[ChatRequest], str] | list[str]) -> None:
        if isinstance(responder, list):
            queue = list(responder)

            def _seq(_req, _q=queue):
                return _q.pop(0) if len(_q) > 1 else _q[0]

            responder = _seq
        self.rules.append((predicate, responder))

    def on_template(self, template_id: str,
                    responder: str | Callable[[ChatRequest], str] | list[str]) -> None:
        self.add_rule(lambda r, t=template_id: r.template_id == t, responder)

    def _complete(self, request: ChatRequest) -> ChatResponse:
        self.calls.append(request)
        for predicate, responder in self.rules:
            if predicate(request):
                text = responder(request) if callable(responder) else responder
                return ChatResponse(text=text, provider="scripted")
        raise ReplayMiss(
            f"no scripted rule for template {request.template_id!r} "
            f"(branch {request.branch_tag!r})"
        )

    def _embed(self, texts: list[str]) -> np.ndarray:
        return self._embedder(texts)


class RecordingGateway(Gateway):
    """Wraps another gateway and appends every chat exchange to a transcript."""

    def __init__(self, inner: Gateway, transcript_path: str | Path):
        super().__init__(inner.profile, inner.token_counter)
        self.inner = inner
        self.transcript_path = Path(transcript_path)
        self.transcript_path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _complete(self, request: ChatRequest) -> ChatResponse:
        response = self.inner.complete(request)
        record = {
            "kind": "chat",
            "hash": request.request_hash,
            "request": {
                "template_id": request.template_id,
                "prompt": request.prompt,
                "temperature": request.temperature,
                "branch_tag": request.branch_tag,
            },
            "response": {"text": response.text, "usage_tokens": response.usage_tokens},
        }
        with self._lock, self.transcript_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        return response

    def _embed(self, texts: list[str]) -> np.ndarray:
        return self.inner.embed(texts)


class ReplayGateway(Gateway):
    """Serves chat responses from transcripts only; a miss is a hard error."""

    def __init__(self, transcript_paths: Iterable[str | Path],
                 profile: ProviderProfile | None = None,
                 embedder: Callable[[Sequence[str]], np.ndarray] | None = None, **kw):
        super().__init__(profile or ProviderProfile(name="mock", dimension=64), **kw)
        self._responses: dict[str, str] = {}
        for path in transcript_paths:
            path = Path(path)
            if not path.exists():
                continue
            with path.open(encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    record = json.loads(line)
                    if record.get("kind") == "chat":
                        self._responses[record["hash"]] = record["response"]["text"]
        self._embedder = embedder or MockEmbedder(self.profile.dimension)

    def __len__(self) -> int:
        return len(self._responses)

    def _complete(self, request: ChatRequest) -> ChatResponse:
        try:
            text = self._responses[request.request_hash]
        except KeyError:
            raise ReplayMiss(
                f"no transcript entry for template {request.template_id!r} "
                f"(branch {request.branch_tag!r}, hash {request.request_hash[:12]})"
            ) from None
        return ChatResponse(text=text, provider="replay")

    def _embed(self, texts: list[str]) -> np.ndarray:
        return self._embedder(texts)


def make_gateway(mode: str, profile: ProviderProfile,
                 transcript_path: str | Path | None = None,
                 replay_paths: Iterable[str | Path] | None = None,
                 embedder: Callable[[Sequence[str]], np.ndarray] | None = None) -> Gateway:
    """Build the gateway for a CLI run. Scripted gateways are test-injected."""
    if mode == "live":
        return LiveGateway(profile, embedder=embedder)
    if mode == "record":
        if transcript_path is None:
            raise ValueError("record mode needs a transcript path")
        return RecordingGateway(LiveGateway(profile, embedder=embedder), transcript_path)
    if mode == "replay":
        return ReplayGateway(replay_paths or [], profile=profile, embedder=embedder)
    raise ValueError(f"unknown gateway mode: {mode!r}")
