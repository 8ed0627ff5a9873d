"""RAG pipeline execution and scoring: runs queries against a KB state and
aggregates per-example scores into the state's reward.

The reward of a state is the plain mean of per-example scores in [0, 1];
failing examples carry feedback (expert text, else harness stderr) that the
critic later turns into edit instructions. Evaluations are cached by
(state fingerprint, example id) because the search revisits states.
"""

from __future__ import annotations

import json
import os
import re
import shlex
import string
import subprocess
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ProviderError
from .gateway import ChatRequest, Gateway, render_template
from .kb import KBState
from .retrieval import IndexCache, RetrievalSet, iterative_retrieve, retrieve

SCORERS = ("exact_match", "normalized_match", "execution_harness")


@dataclass(frozen=True)
class TrainExample:
    """One supervised datapoint: query, expected answer, optional feedback."""

    example_id: str
    query: str
    correct: str  # expected answer text, or a test-bench reference for the harness
    expert_feedback: str = ""
    system_output: str = ""  # last observed output; empty before the first run

    def __post_init__(self):
        if not self.query:
            raise ValueError(f"example {self.example_id!r}: query must be non-empty")
        if not self.correct:
            raise ValueError(f"example {self.example_id!r}: correct answer must be present")

    def to_json(self) -> dict:
        return {
            "example_id": self.example_id,
            "query": self.query,
            "correct": self.correct,
            "expert_feedback": self.expert_feedback,
            "system_output": self.system_output,
        }

    @classmethod
    def from_json(cls, data: dict) -> "TrainExample":
        return cls(
            example_id=data["example_id"],
            query=data["query"],
            correct=data["correct"],
            expert_feedback=data.get("expert_feedback", ""),
            system_output=data.get("system_output", ""),
        )


@dataclass
class ScorerConfig:
    kind: str = "exact_match"
    harness_cmd: str = ""  # command template; {answer_file} and {bench} are filled in
    timeout_s: float = 60.0

    def __post_init__(self):
        if self.kind not in SCORERS:
            raise ValueError(f"unknown scorer: {self.kind!r}")
        env = os.environ.get("KBFORGE_TIMEOUT_S")
        if env:
            self.timeout_s = float(env)


@dataclass(frozen=True)
class ScoreOutcome:
    value: float
    feedback: str = ""  # harness stderr / timeout marker; empty for string scorers


def _collapse_ws(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


def _fold(text: str) -> str:
    return _collapse_ws(text.lower().translate(str.maketrans("", "", string.punctuation)))


def score(output: str, correct: str, scorer: ScorerConfig) -> ScoreOutcome:
    """Compare a system output against the expected answer.

    exact_match folds whitespace only; normalized_match also folds case and
    punctuation; execution_harness runs a configured command against the
    output materialized to a temp file and scores on its exit code, keeping
    stderr as candidate expert feedback.
    """
    if scorer.kind == "exact_match":
        return ScoreOutcome(1.0 if _collapse_ws(output) == _collapse_ws(correct) else 0.0)
    if scorer.kind == "normalized_match":
        return ScoreOutcome(1.0 if _fold(output) == _fold(correct) else 0.0)
    return _run_harness(output, correct, scorer)


def _run_harness(output: str, bench_ref: str, scorer: ScorerConfig) -> ScoreOutcome:
    if not scorer.harness_cmd:
        raise ValueError("execution_harness scorer needs harness_cmd")
    with tempfile.NamedTemporaryFile("w", suffix=".out", delete=False, encoding="utf-8") as fh:
        fh.write(output)
        answer_file = fh.name
    try:
        cmd = [
            part.format(answer_file=answer_file, bench=bench_ref)
            for part in shlex.split(scorer.harness_cmd)
        ]
        try:
            proc = subprocess.run(
                cmd, capture_output=True, text=True, timeout=scorer.timeout_s
            )
        except subprocess.TimeoutExpired:
            return ScoreOutcome(0.0, "timeout")
        if proc.returncode == 0:
            return ScoreOutcome(1.0)
        stderr = (proc.stderr or proc.stdout or "").strip()
        return ScoreOutcome(0.0, stderr or f"exit code {proc.returncode}")
    finally:
        os.unlink(answer_file)


# --- answering ------------------------------------------------------------------


@dataclass
class AnswerTranscript:
    prompts: list[str]
    request_hashes: list[str]
    retrieval_ids: list[str]
    raw_completions: list[str]


@dataclass
class AnswerResult:
    output: str
    retrieval: RetrievalSet
    transcript: AnswerTranscript


@dataclass
class EngineConfig:
    task: str = "question answering"
    task_desc: str = "answer user questions from the knowledge base"
    kb_desc: str = "a directory of text documents"
    token_budget: int = 18000
    iterative_retrieval: bool = False
    answer_max_tokens: int | None = None
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    max_workers: int = 1


def context_blocks(retrieval: RetrievalSet) -> str:
    if not retrieval.entries:
        return "(no reference material was retrieved)"
    blocks = []
    for entry in retrieval.entries:
        c = entry.chunk
        span = c.span[0] if c.span[0] == c.span[1] else f"{c.span[0]}..{c.span[1]}"
        blocks.append(f"[source: {c.doc_id} :: {span}]\n<file>\n{c.text}\n</file>")
    return "\n\n".join(blocks)


@dataclass
class ExampleResult:
    example_id: str
    score: float
    output: str
    feedback: str  # expert feedback, else harness stderr; empty when passing
    retrieval: RetrievalSet
    request_hashes: list[str]


@dataclass
class ScoreReport:
    per_example: tuple[ExampleResult, ...]
    reward: float

    def failing(self) -> list[ExampleResult]:
        return [r for r in self.per_example if r.score < 1.0]


class RagEngine:
    def __init__(self, gateway: Gateway, index_cache: IndexCache, config: EngineConfig,
                 eval_log_path: str | Path | None = None):
        self.gateway = gateway
        self.index_cache = index_cache
        self.config = config
        self._cache: dict[tuple[str, str], ExampleResult] = {}
        self._lock = threading.Lock()
        self.eval_log_path = Path(eval_log_path) if eval_log_path else None

    # -- answering --

    def answer(self, query: str, state: KBState) -> AnswerResult:
        index = self.index_cache.get_or_build(state)
        retrieval = retrieve(query, index, self.config.token_budget)
        transcript = AnswerTranscript([], [], [e.chunk.doc_id for e in retrieval.entries], [])

        output = self._complete_answer(query, retrieval, transcript)
        if self.config.iterative_retrieval:
            retrieval = iterative_retrieve(query, index, output, self.config.token_budget)
            transcript.retrieval_ids.extend(e.chunk.doc_id for e in retrieval.entries)
            output = self._complete_answer(query, retrieval, transcript)
        return AnswerResult(output=output, retrieval=retrieval, transcript=transcript)

    def _complete_answer(self, query: str, retrieval: RetrievalSet,
                         transcript: AnswerTranscript) -> str:
        prompt = render_template("answer.v1", {
            "task": self.config.task,
            "task_desc": self.config.task_desc,
            "context_blocks": context_blocks(retrieval),
            "query": query,
        })
        request = ChatRequest(template_id="answer.v1", prompt=prompt,
                              max_tokens=self.config.answer_max_tokens)
        response = self.gateway.complete(request)
        transcript.prompts.append(prompt)
        transcript.request_hashes.append(request.request_hash)
        transcript.raw_completions.append(response.text)
        return response.text

    # -- evaluation --

    def evaluate_state(self, state: KBState, examples: list[TrainExample]) -> ScoreReport:
        if not examples:
            raise ValueError("evaluate_state needs at least one example")
        fp = state.fingerprint

        def run_one(example: TrainExample) -> ExampleResult:
            key = (fp, example.example_id)
            with self._lock:
                if key in self._cache:
                    return self._cache[key]
            result = self._evaluate_one(state, example)
            with self._lock:
                self._cache[key] = result
            self._log_eval(fp, result)
            return result

        if self.config.max_workers > 1:
            with ThreadPoolExecutor(max_workers=self.config.max_workers) as pool:
                results = list(pool.map(run_one, examples))
        else:
            results = [run_one(e) for e in examples]

        reward = sum(r.score for r in results) / len(results)
        return ScoreReport(per_example=tuple(results), reward=reward)

    def _evaluate_one(self, state: KBState, example: TrainExample) -> ExampleResult:
        try:
            answer = self.answer(example.query, state)
        except ProviderError:
            # Keep rewards total: a dead provider scores the example 0 rather
            # than aborting the surrounding search.
            return ExampleResult(
                example_id=example.example_id,
                score=0.0,
                output="",
                feedback="provider_error",
                retrieval=RetrievalSet(entries=(), total_tokens=0),
                request_hashes=[],
            )
        outcome = score(answer.output, example.correct, self.config.scorer)
        feedback = ""
        if outcome.value < 1.0:
            feedback = example.expert_feedback or outcome.feedback
        return ExampleResult(
            example_id=example.example_id,
            score=outcome.value,
            output=answer.output,
            feedback=feedback,
            retrieval=answer.retrieval,
            request_hashes=answer.transcript.request_hashes,
        )

    def _log_eval(self, fingerprint: str, result: ExampleResult) -> None:
        if self.eval_log_path is None:
            return
        record = {
            "state": fingerprint,
            "example_id": result.example_id,
            "score": result.score,
            "output": result.output,
            "feedback": result.feedback,
            "request_hashes": result.request_hashes,
        }
        self.eval_log_path.parent.mkdir(parents=True, exist_ok=True)
        with self._lock, self.eval_log_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
