"""Centralized critic: reflections over failures, document blame assignment,
and per-document aggregated edit instructions.

For every failing example the critic writes an overall reflection, then
decides per retrieved file whether it needs editing (at most a configured
handful per example, "None" standing for a brand-new file). Verdicts are
grouped by document and each group is generalized into one instruction blob
for that document's actor. Instructions are recomputed from scratch at every
search expansion; nothing is inherited across states.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .audit import AuditLog
from .errors import FeedbackMissing, ReplyParseError
from .gateway import ChatRequest, Gateway, render_template
from .kb import NONE_FILE
from .rag import ExampleResult, TrainExample
from .retrieval import RetrievalSet

_SCRATCHPAD_RE = re.compile(r"<scratchpad>(.*?)</scratchpad>", re.DOTALL)
_REFLECTION_RE = re.compile(r"<reflection>(.*?)</reflection>", re.DOTALL)
_GENERALIZATION_RE = re.compile(r"<generalization>(.*?)</generalization>", re.DOTALL)
_FILE_BLOCK_RE = re.compile(r"<File\s+(\d+)>(.*?)</File\s+\1>", re.DOTALL)
_JSON_FENCE_RE = re.compile(r"```(?:json)?\s*(\{.*\})\s*```", re.DOTALL)

_RETRY_SUFFIX = (
    "\n\nYour previous reply could not be parsed. Reply again, strictly in the "
    "required output format, with no other text."
)


@dataclass(frozen=True)
class Reflection:
    example_id: str
    scratchpad: str  # kept for audit; never fed into downstream prompts
    body: str
    retry_count: int = 0


@dataclass(frozen=True)
class FileVerdict:
    file_id: str  # retrieved document id, or the "None" pseudo-file
    needs_editing: bool
    reflection: str


@dataclass(frozen=True)
class Selection:
    example_id: str
    per_file: tuple[FileVerdict, ...]

    def edited_files(self) -> list[FileVerdict]:
        return [v for v in self.per_file if v.needs_editing]


@dataclass(frozen=True)
class PartialGradient:
    doc_id: str  # real document id, or the "None" pseudo-file
    gradient_text: str
    supporting_example_ids: tuple[str, ...]
    degraded: bool = False

    @property
    def creates_document(self) -> bool:
        return self.doc_id == NONE_FILE


@dataclass
class CriticConfig:
    task: str = "question answering"
    task_desc: str = "answer user questions from the knowledge base"
    kb_desc: str = "a directory of text documents"
    max_edited_files: int = 2
    show_test_bench: bool = False


def files_in_retrieval(retrieval: RetrievalSet) -> list[tuple[str, str]]:
    """Collapse a retrieval set into (doc_id, joined text) in rank order."""
    by_doc: dict[str, list] = {}
    order: list[str] = []
    for entry in retrieval.entries:
        if entry.chunk.doc_id not in by_doc:
            by_doc[entry.chunk.doc_id] = []
            order.append(entry.chunk.doc_id)
        by_doc[entry.chunk.doc_id].append(entry.chunk)
    out = []
    for doc_id in order:
        chunks = sorted(by_doc[doc_id], key=lambda c: c.seq)
        out.append((doc_id, "".join(c.text for c in chunks)))
    return out


def render_file_blocks(files: list[tuple[str, str]]) -> str:
    blocks = []
    for i, (doc_id, content) in enumerate(files):
        blocks.append(f"File {i + 1}:\nid: {doc_id}\ncontent:\n<file>\n{content}\n</file>")
    return "\n\n".join(blocks) if blocks else "(no files were retrieved)"


class Critic:
    def __init__(self, gateway: Gateway, config: CriticConfig | None = None,
                 audit: AuditLog | None = None):
        self.gateway = gateway
        self.config = config or CriticConfig()
        self.audit = audit or AuditLog()

    # -- plumbing --

    def _ask(self, template_id: str, variables: dict, branch_tag: str,
             parse, max_retries: int):
        """Render, complete, parse; re-prompt with a corrective suffix on parse
        failures. `parse` returns None to signal a malformed reply."""
        prompt = render_template(template_id, variables)
        attempt = 0
        while True:
            request = ChatRequest(template_id=template_id, prompt=prompt, branch_tag=branch_tag)
            response = self.gateway.complete(request)
            parsed = parse(response.text)
            if parsed is not None:
                return parsed, attempt
            attempt += 1
            if attempt > max_retries:
                raise ReplyParseError(
                    f"{template_id}: unparseable reply after {max_retries} re-prompts"
                )
            self.audit.add("reply_reparse", template=template_id, attempt=attempt)
            prompt = prompt + _RETRY_SUFFIX

    def _test_bench_section(self, example: TrainExample) -> str:
        if not self.config.show_test_bench:
            return ""
        return (
            "The request includes the following test bench; the output is "
            f"inserted into it and executed:\n<test_bench>\n{example.correct}\n"
            "</test_bench>\n\n"
        )

    # -- reflection (overall text gradient for one failure) --

    def reflect(self, example: TrainExample, result: ExampleResult,
                branch_tag: str = "") -> Reflection:
        if result.score >= 1.0:
            raise ValueError(f"example {example.example_id!r} did not fail")
        if not result.feedback:
            raise FeedbackMissing(
                f"example {example.example_id!r} has no expert feedback or harness output"
            )
        variables = {
            "task": self.config.task,
            "task_desc": self.config.task_desc,
            "kb_desc": self.config.kb_desc,
            "query": example.query,
            "test_bench_section": self._test_bench_section(example),
            "output": result.output,
            "feedback": result.feedback,
            "files": render_file_blocks(files_in_retrieval(result.retrieval)),
        }

        def parse(text: str):
            m = _REFLECTION_RE.search(text)
            if not m or not m.group(1).strip():
                return None
            pad = _SCRATCHPAD_RE.search(text)
            return (pad.group(1).strip() if pad else "", m.group(1).strip())

        (scratchpad, body), retries = self._ask(
            "reflection.v1", variables, branch_tag, parse, max_retries=2
        )
        return Reflection(example.example_id, scratchpad, body, retry_count=retries)

    # -- selection (document blame assignment) --

    def select(self, example: TrainExample, result: ExampleResult,
               reflection: Reflection, branch_tag: str = "") -> Selection:
        files = files_in_retrieval(result.retrieval)
        known = {doc_id for doc_id, _ in files}
        variables = {
            "task": self.config.task,
            "task_desc": self.config.task_desc,
            "kb_desc": self.config.kb_desc,
            "query": example.query,
            "test_bench_section": self._test_bench_section(example),
            "output": result.output,
            "feedback": result.feedback,
            "reflection": reflection.body,
            "files": render_file_blocks(files),
            "none_index": str(len(files) + 1),
            "max_edited_files": str(self.config.max_edited_files),
        }

        def parse(text: str):
            verdicts = self._parse_file_blocks(text)
            return verdicts if verdicts else None

        verdicts, _ = self._ask("selection.v1", variables, branch_tag, parse, max_retries=2)

        # Unknown file names get one corrective round-trip, then are dropped.
        if any(v.file_id not in known and v.file_id != NONE_FILE for v in verdicts):
            bad = [v.file_id for v in verdicts if v.file_id not in known and v.file_id != NONE_FILE]
            self.audit.add("selection_unknown_files", example_id=example.example_id, files=bad)
            prompt = render_template("selection.v1", variables) + (
                "\n\nYour previous reply named files that were not retrieved: "
                f"{', '.join(sorted(bad))}. Reply again using only these file names: "
                f"{', '.join(sorted(known))}, or \"None\"."
            )
            request = ChatRequest(template_id="selection.v1", prompt=prompt, branch_tag=branch_tag)
            retry_verdicts = self._parse_file_blocks(self.gateway.complete(request).text)
            if retry_verdicts:
                verdicts = retry_verdicts
            kept = [v for v in verdicts if v.file_id in known or v.file_id == NONE_FILE]
            for v in verdicts:
                if v not in kept:
                    self.audit.add("selection_entry_dropped", example_id=example.example_id,
                                   file=v.file_id, reason="unknown file")
            verdicts = kept
            if not verdicts:
                raise ReplyParseError(f"selection for {example.example_id!r} named no known file")

        verdicts = self._normalize_verdicts(example.example_id, verdicts)
        return Selection(example_id=example.example_id, per_file=tuple(verdicts))

    def _parse_file_blocks(self, text: str) -> list[FileVerdict]:
        verdicts = []
        for _num, block in _FILE_BLOCK_RE.findall(text):
            file_m = re.search(r"^File:\s*(.+?)\s*$", block, re.MULTILINE)
            needs_m = re.search(r"^needs_editing:\s*(true|false)\s*$", block,
                                re.MULTILINE | re.IGNORECASE)
            refl_m = re.search(r"Reflection:\s*(.*)\Z", block, re.DOTALL)
            if not file_m or not needs_m:
                continue
            name = file_m.group(1).strip().strip('"')
            verdicts.append(FileVerdict(
                file_id=NONE_FILE if name.lower() == "none" else name,
                needs_editing=needs_m.group(1).lower() == "true",
                reflection=refl_m.group(1).strip() if refl_m else "",
            ))
        return verdicts

    def _normalize_verdicts(self, example_id: str, verdicts: list[FileVerdict]) -> list[FileVerdict]:
        out: list[FileVerdict] = []
        edits = 0
        for v in verdicts:
            if v.file_id == NONE_FILE and not v.needs_editing:
                self.audit.add("selection_none_forced_true", example_id=example_id)
                v = FileVerdict(NONE_FILE, True, v.reflection)
            if v.needs_editing and edits >= self.config.max_edited_files:
                if v.file_id == NONE_FILE:
                    # "None" cannot be demoted to not-needing-editing; drop it.
                    self.audit.add("selection_entry_dropped", example_id=example_id,
                                   file=v.file_id, reason="edit cap")
                    continue
                self.audit.add("selection_demoted", example_id=example_id, file=v.file_id)
                v = FileVerdict(v.file_id, False, v.reflection)
            if v.needs_editing:
                edits += 1
            out.append(v)
        return out

    # -- gradient aggregation (per-document generalized instructions) --

    def aggregate_gradients(self, doc_id: str,
                            reflections: list[tuple[str, str]],
                            doc_content: str | None,
                            branch_tag: str = "") -> PartialGradient:
        if not reflections:
            raise ValueError(f"no reflections for {doc_id!r}")
        reflections = sorted(reflections, key=lambda r: r[0])
        if doc_id == NONE_FILE:
            file_block = (
                'File:\nid: "None"\n(this file does not exist yet; the fix belongs '
                "in a new file)"
            )
        else:
            file_block = f"File:\nid: {doc_id}\ncontent:\n<file>\n{doc_content}\n</file>"
        reflections_str = "\n\n".join(
            f"Reflection (from request {ex_id}):\n{body}" for ex_id, body in reflections
        )
        variables = {
            "task": self.config.task,
            "task_desc": self.config.task_desc,
            "kb_desc": self.config.kb_desc,
            "file_block": file_block,
            "reflections": reflections_str,
        }

        def parse(text: str):
            m = _GENERALIZATION_RE.search(text)
            if not m or not m.group(1).strip():
                return None
            return m.group(1).strip()

        example_ids = tuple(ex_id for ex_id, _ in reflections)
        try:
            gradient_text, _ = self._ask(
                "generalization.v1", variables, branch_tag, parse, max_retries=1
            )
        except ReplyParseError:
            # Degraded mode: raw concatenation still gives the actor something.
            self.audit.add("gradient_degraded", doc_id=doc_id)
            header = f"Issues reported against {doc_id}:"
            gradient_text = header + "\n\n" + "\n\n".join(body for _, body in reflections)
            return PartialGradient(doc_id, gradient_text, example_ids, degraded=True)
        return PartialGradient(doc_id, gradient_text, example_ids)

    # -- full critic pass over a failure set --

    def generate_gradients(self, failures: list[tuple[TrainExample, ExampleResult]],
                           state_docs: dict[str, str],
                           branch_tag: str = "") -> tuple[list[PartialGradient], dict]:
        """Reflect + select per failing example, then aggregate per document.

        Examples without usable feedback or with unparseable replies are
        skipped with an audit record rather than failing the pass. Returns
        gradients sorted by doc id plus a provenance trace.
        """
        clusters: dict[str, list[tuple[str, str]]] = {}
        trace: dict = {"reflections": {}, "selections": {}, "skipped": []}
        for example, result in sorted(failures, key=lambda fr: fr[0].example_id):
            try:
                reflection = self.reflect(example, result, branch_tag)
                selection = self.select(example, result, reflection, branch_tag)
            except (FeedbackMissing, ReplyParseError) as exc:
                self.audit.add("example_skipped", example_id=example.example_id, error=str(exc))
                trace["skipped"].append(example.example_id)
                continue
            trace["reflections"][example.example_id] = reflection
            trace["selections"][example.example_id] = selection
            for verdict in selection.edited_files():
                clusters.setdefault(verdict.file_id, []).append(
                    (example.example_id, verdict.reflection or reflection.body)
                )

        gradients = []
        for doc_id in sorted(clusters):
            content = None if doc_id == NONE_FILE else state_docs.get(doc_id, "")
            gradients.append(
                self.aggregate_gradients(doc_id, clusters[doc_id], content, branch_tag)
            )
        return gradients, trace

    # -- expert feedback splitting --

    def parse_feedback(self, raw_feedback: str, edited_files: list[str],
                       branch_tag: str = "") -> dict:
        """Split one feedback blob into per-file entries, preserving the text.

        The output follows a fixed JSON schema; every feedback string must be
        a (whitespace-normalized) contiguous substring of the input, and
        target files must name an edited file or be empty. Irreparable replies
        degrade to a single untargeted entry holding the whole feedback.
        """
        if not raw_feedback:
            raise ValueError("raw_feedback must be non-empty")
        variables = {
            "task": self.config.task,
            "task_desc": self.config.task_desc,
            "files": "\n".join(edited_files) if edited_files else "(none)",
            "feedback": raw_feedback,
        }

        def parse(text: str):
            data = self._extract_json(text)
            if data is None:
                return None
            return self._validate_feedback_schema(data, raw_feedback, edited_files)

        try:
            parsed, _ = self._ask("feedback_parse.v1", variables, branch_tag, parse, max_retries=2)
            return parsed
        except ReplyParseError:
            self.audit.add("feedback_parse_degraded")
            return {
                "task": self.config.task,
                "num_files": 1,
                "feedback_files": [{
                    "target_file": "",
                    "num_feedbacks": 1,
                    "feedbacks": [{
                        "feedback_tone": "negative",
                        "target_spans": [],
                        "feedback": raw_feedback,
                    }],
                }],
            }

    @staticmethod
    def _extract_json(text: str):
        m = _JSON_FENCE_RE.search(text)
        candidate = m.group(1) if m else None
        if candidate is None:
            start, end = text.find("{"), text.rfind("}")
            if start == -1 or end <= start:
                return None
            candidate = text[start : end + 1]
        try:
            data = json.loads(candidate)
        except json.JSONDecodeError:
            return None
        return data if isinstance(data, dict) else None

    def _validate_feedback_schema(self, data: dict, raw_feedback: str,
                                  edited_files: list[str]):
        normalized_raw = re.sub(r"\s+", " ", raw_feedback).strip()
        files = data.get("feedback_files")
        if not isinstance(files, list) or not files:
            return None
        out_files = []
        for entry in files:
            if not isinstance(entry, dict):
                return None
            target = entry.get("target_file", "")
            if not isinstance(target, str):
                return None
            if target and target not in edited_files:
                self.audit.add("feedback_unknown_target", target=target)
                target = ""
            feedbacks = entry.get("feedbacks")
            if not isinstance(feedbacks, list) or not feedbacks:
                return None
            out_fb = []
            for fb in feedbacks:
                if not isinstance(fb, dict):
                    return None
                tone = fb.get("feedback_tone")
                text = fb.get("feedback")
                spans = fb.get("target_spans", [])
                if tone not in ("positive", "negative") or not isinstance(text, str):
                    return None
                if re.sub(r"\s+", " ", text).strip() not in normalized_raw:
                    # The model altered the feedback text: reject and re-prompt.
                    return None
                if not isinstance(spans, list) or not all(
                    isinstance(s, dict) and {"start", "end"} <= set(s) for s in spans
                ):
                    spans = []
                out_fb.append({"feedback_tone": tone, "target_spans": spans, "feedback": text})
            out_files.append({
                "target_file": target,
                "num_feedbacks": len(out_fb),
                "feedbacks": out_fb,
            })
        return {
            "task": data.get("task", self.config.task),
            "num_files": len(out_files),
            "feedback_files": out_files,
        }
