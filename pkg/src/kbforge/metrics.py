"""Quality metrics for edited knowledge bases and the dataset split protocol.

Completeness and generalization are the train/test accuracies of the edited
KB expressed as percentages (straight affine images of the engine reward, no
independent computation path). Coherence asks a judge model to score each
edited document's diff for thematic fit on a 1-5 scale and averages over the
edited documents; it is absent when nothing was edited.
"""

from __future__ import annotations

import difflib
import random
import re
from dataclasses import dataclass, field

from .audit import AuditLog
from .errors import ReplyParseError
from .gateway import ChatRequest, Gateway, render_template
from .kb import KBState
from .rag import RagEngine, TrainExample

_SCORE_RE = re.compile(r"Score:\s*([0-9]+(?:\.[0-9]+)?)", re.IGNORECASE)
_NUMBER_RE = re.compile(r"([0-9]+(?:\.[0-9]+)?)")


@dataclass
class MetricReport:
    completeness: float | None = None  # percent, train split
    generalization: float | None = None  # percent, test split
    eval_reward: float | None = None  # eval split accuracy, reported not optimized
    coherence: float | None = None  # 1-5, absent when no documents were edited
    per_document_coherence: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "completeness": self.completeness,
            "generalization": self.generalization,
            "eval_reward": self.eval_reward,
            "coherence": self.coherence,
            "per_document_coherence": dict(sorted(self.per_document_coherence.items())),
        }


def completeness(engine: RagEngine, best_state: KBState,
                 train_examples: list[TrainExample]) -> float:
    """Train-split accuracy (percent): how much feedback was incorporated."""
    return 100.0 * engine.evaluate_state(best_state, train_examples).reward


def generalization(engine: RagEngine, best_state: KBState,
                   test_examples: list[TrainExample]) -> float:
    """Held-out test-split accuracy (percent)."""
    return 100.0 * engine.evaluate_state(best_state, test_examples).reward


def edited_documents(initial: KBState, best: KBState) -> list[str]:
    """Ids of documents whose content changed or that were created."""
    out = []
    for doc in best.docs:
        old = initial.documents.get(doc.id)
        if old is None or old.text != doc.text:
            out.append(doc.id)
    return out


def document_diff_text(initial: KBState, best: KBState, doc_id: str, context: int = 3) -> str:
    old = initial.documents.get(doc_id)
    old_lines = old.text.splitlines(keepends=True) if old else []
    new_lines = best.doc(doc_id).text.splitlines(keepends=True)
    diff = difflib.unified_diff(
        old_lines, new_lines, fromfile=f"a/{doc_id}", tofile=f"b/{doc_id}", n=context
    )
    return "".join(diff)


def _parse_judge_score(text: str) -> float | None:
    m = _SCORE_RE.search(text) or _NUMBER_RE.search(text)
    return float(m.group(1)) if m else None


def coherence(initial: KBState, best: KBState, gateway: Gateway,
              audit: AuditLog | None = None,
              branch_tag: str = "") -> tuple[float | None, dict[str, float]]:
    """Judge each edited document's diff for thematic fit; average the scores.

    Returns (None, {}) when no document was edited. Scores outside [1, 5] are
    clamped with an audit record; documents whose judge reply stays
    unparseable after one re-prompt are excluded with an audit record.
    """
    audit = audit or AuditLog()
    per_doc: dict[str, float] = {}
    for doc_id in edited_documents(initial, best):
        old = initial.documents.get(doc_id)
        prompt = render_template("judge.v1", {
            "doc_id": doc_id,
            "document": old.text if old else "(this is a new document)",
            "diff": document_diff_text(initial, best, doc_id),
        })
        score = None
        for attempt in range(2):
            request = ChatRequest(template_id="judge.v1", prompt=prompt, branch_tag=branch_tag)
            score = _parse_judge_score(gateway.complete(request).text)
            if score is not None:
                break
            audit.add("judge_reparse", doc_id=doc_id, attempt=attempt + 1)
            prompt += "\n\nReply with exactly one line in the form `Score: <number>`."
        if score is None:
            audit.add("judge_unparseable", doc_id=doc_id)
            continue
        if not 1.0 <= score <= 5.0:
            audit.add("judge_score_clamped", doc_id=doc_id, raw=score)
            score = min(max(score, 1.0), 5.0)
        per_doc[doc_id] = score
    if not per_doc:
        return None, {}
    return sum(per_doc.values()) / len(per_doc), per_doc


def split_dataset(examples: list[TrainExample], base_state: KBState, engine: RagEngine,
                  ratios: tuple[int, int, int] = (1, 1, 2), seed: int = 0,
                  ) -> tuple[list[TrainExample], list[TrainExample], list[TrainExample]]:
    """Failure-first split: run the pipeline on the base state, shuffle the
    failures with `seed`, cut them train/eval/test by `ratios`, and append
    every already-passing example to the test split."""
    if min(ratios) <= 0:
        raise ValueError("ratios must be positive")
    report = engine.evaluate_state(base_state, examples)
    by_id = {e.example_id: e for e in examples}
    failures = [by_id[r.example_id] for r in report.per_example if r.score < 1.0]
    successes = [by_id[r.example_id] for r in report.per_example if r.score >= 1.0]

    rng = random.Random(seed)
    rng.shuffle(failures)
    total = sum(ratios)
    n = len(failures)
    n_train = n * ratios[0] // total
    n_eval = n * ratios[1] // total
    train = failures[:n_train]
    eval_split = failures[n_train : n_train + n_eval]
    test = failures[n_train + n_eval :] + successes
    return train, eval_split, test
