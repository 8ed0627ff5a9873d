"""Per-document editing agents.

Each selected document gets its own agent which walks a bounded
thought/action loop over the document's named sections, applying one chunk
action per turn against a private working copy. Agents see an outline rather
than the whole document (plus the full text of the section they last
touched) and are memoryless across search nodes. Their finished diffs are
pooled into a single KB edit.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .audit import AuditLog
from .critic import PartialGradient
from .errors import DuplicateDocId, KBForgeError, NameCollision, TargetMissing
from .gateway import ChatRequest, Gateway, render_template
from .kb import (
    AddChunk,
    ChunkOp,
    DeleteChunk,
    Document,
    DocumentDiff,
    EditChunk,
    KBEdit,
    NONE_FILE,
    apply_ops,
    diff_documents,
    slugify,
)

ACTIONS = ("EditChunk", "AddChunk", "DeleteChunk", "Finish")

_ACTION_RE = re.compile(
    r"Thought:\s*(?P<thought>.*?)\s*Action:\s*(?P<action>\w+)\s*(?:Action\s*Input:\s*(?P<input>.*))?\Z",
    re.DOTALL,
)

MAX_CONSECUTIVE_INVALID = 3


@dataclass(frozen=True)
class ActorStep:
    thought: str
    action: str  # EditChunk | AddChunk | DeleteChunk | Finish | invalid
    action_input: dict
    observation: str


@dataclass(frozen=True)
class Trajectory:
    doc_id: str
    steps: tuple[ActorStep, ...]
    result_diff: DocumentDiff
    aborted: bool = False
    illegal_steps: int = 0

    @property
    def is_identity(self) -> bool:
        return self.result_diff.is_identity


@dataclass
class ActorConfig:
    max_steps: int = 8
    outline_line_chars: int = 120


def _outline(doc: Document, limit: int) -> str:
    if not doc.chunks:
        return "(the document is currently empty)"
    lines = []
    for chunk in doc.chunks:
        first = chunk.text.splitlines()[0] if chunk.text else ""
        if len(first) > limit:
            first = first[: limit - 3] + "..."
        lines.append(f"- {chunk.name}: {first}")
    return "\n".join(lines)


def _parse_reply(text: str) -> tuple[str, str, dict] | None:
    m = _ACTION_RE.search(text.strip())
    if not m:
        return None
    action = m.group("action")
    if action not in ACTIONS:
        return None
    raw = (m.group("input") or "").strip()
    if action == "Finish":
        return (m.group("thought").strip(), action, {})
    if not raw:
        return None
    start = raw.find("{")
    end = raw.rfind("}")
    if start == -1 or end <= start:
        return None
    try:
        args = json.loads(raw[start : end + 1])
    except json.JSONDecodeError:
        return None
    if not isinstance(args, dict):
        return None
    return (m.group("thought").strip(), action, args)


def _to_op(action: str, args: dict) -> ChunkOp:
    if action == "EditChunk":
        target, text = args.get("target"), args.get("text")
        if not isinstance(target, str) or not isinstance(text, str):
            raise KBForgeError("EditChunk needs string 'target' and 'text'")
        if not text.strip():
            raise KBForgeError("EditChunk must not replace a section with empty text; use DeleteChunk")
        return EditChunk(target, text)
    if action == "AddChunk":
        name, text = args.get("name"), args.get("text")
        if not isinstance(name, str) or not name or not isinstance(text, str):
            raise KBForgeError("AddChunk needs non-empty string 'name' and string 'text'")
        insert_after = args.get("insert_after")
        if insert_after is not None and not isinstance(insert_after, str):
            raise KBForgeError("AddChunk 'insert_after' must be a section name or null")
        return AddChunk(name, text, insert_after)
    if action == "DeleteChunk":
        target = args.get("target")
        if not isinstance(target, str):
            raise KBForgeError("DeleteChunk needs string 'target'")
        return DeleteChunk(target)
    raise KBForgeError(f"unknown action {action!r}")


def _generated_doc_id(doc: Document) -> str:
    return f"generated/{slugify(doc.chunks[0].name)}.md"


def edit_document(doc: Document, gradient: PartialGradient, gateway: Gateway,
                  config: ActorConfig | None = None, audit: AuditLog | None = None,
                  branch_tag: str = "") -> Trajectory:
    """Run one editing agent over `doc` under `gradient` instructions.

    For a "None" gradient, pass an empty seed document; a non-empty result is
    materialized as a generated markdown file named after its first section.
    Three consecutive steps without a valid applied action abort the
    trajectory and discard its edits.
    """
    config = config or ActorConfig()
    audit = audit or AuditLog()
    creating = gradient.creates_document
    if not creating and gradient.doc_id != doc.id:
        raise KBForgeError(f"gradient targets {gradient.doc_id!r}, not {doc.id!r}")

    working = doc
    steps: list[ActorStep] = []
    consecutive_invalid = 0
    illegal = 0
    focus_name: str | None = None
    aborted = False

    while len(steps) < config.max_steps:
        prompt = render_template("actor.v1", {
            "doc_id": "(a brand-new document; pick clear section names)" if creating else doc.id,
            "gradient": gradient.gradient_text,
            "outline": _outline(working, config.outline_line_chars),
            "focus_block": _focus_block(working, focus_name),
            "history": _history(steps) or "(none yet)",
        })
        reply = gateway.complete(
            ChatRequest(template_id="actor.v1", prompt=prompt, branch_tag=branch_tag)
        ).text

        parsed = _parse_reply(reply)
        if parsed is None:
            consecutive_invalid += 1
            illegal += 1
            steps.append(ActorStep(
                thought=reply.strip()[:500], action="invalid", action_input={},
                observation="ERROR: reply was not a valid Thought/Action/Action Input block",
            ))
            if consecutive_invalid >= MAX_CONSECUTIVE_INVALID:
                aborted = True
                break
            continue

        thought, action, args = parsed
        if action == "Finish":
            steps.append(ActorStep(thought, action, {}, "done"))
            break

        try:
            op = _to_op(action, args)
            working = apply_ops(working, [op])
        except (KBForgeError, TargetMissing, NameCollision) as exc:
            consecutive_invalid += 1
            illegal += 1
            steps.append(ActorStep(thought, action, args, f"ERROR: {exc}"))
            if consecutive_invalid >= MAX_CONSECUTIVE_INVALID:
                aborted = True
                break
            continue

        consecutive_invalid = 0
        focus_name = args.get("target") or args.get("name")
        steps.append(ActorStep(
            thought, action, args,
            f"applied; outline now:\n{_outline(working, config.outline_line_chars)}",
        ))

    if aborted:
        audit.add("trajectory_aborted", doc_id=gradient.doc_id, steps=len(steps))
        result = DocumentDiff(doc_id=doc.id)
    elif creating:
        if working.chunks:
            new_id = _generated_doc_id(working)
            ops = []
            prev = None
            for chunk in working.chunks:
                ops.append(AddChunk(chunk.name, chunk.text, insert_after=prev))
                prev = chunk.name
            result = DocumentDiff(doc_id=new_id, ops=tuple(ops), creates_document=True)
        else:
            result = DocumentDiff(doc_id=doc.id)
    else:
        result = diff_documents(doc, working)

    return Trajectory(
        doc_id=result.doc_id,
        steps=tuple(steps),
        result_diff=result,
        aborted=aborted,
        illegal_steps=illegal,
    )


def _focus_block(doc: Document, name: str | None) -> str:
    if not name:
        return ""
    chunk = doc.find(name)
    if chunk is None:
        return ""
    return (
        f"Full content of the section you last touched ({name}):\n"
        f"<section>\n{chunk.text}\n</section>\n\n"
    )


def _history(steps: list[ActorStep]) -> str:
    parts = []
    for i, step in enumerate(steps, start=1):
        parts.append(
            f"Step {i}:\nThought: {step.thought}\nAction: {step.action}\n"
            f"Action Input: {json.dumps(step.action_input, ensure_ascii=False)}\n"
            f"Observation: {step.observation}"
        )
    return "\n\n".join(parts)


def pool_edits(trajectories: list[Trajectory]) -> KBEdit:
    """Pool per-document trajectories into one edit, dropping identity diffs."""
    diffs = [t.result_diff for t in trajectories if not t.is_identity]
    ids = [d.doc_id for d in diffs]
    if len(ids) != len(set(ids)):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise DuplicateDocId(f"multiple trajectories target: {dupes}")
    return KBEdit(diffs=tuple(sorted(diffs, key=lambda d: d.doc_id)))


def run_actors(state_docs: dict[str, Document], gradients: list[PartialGradient],
               gateway: Gateway, config: ActorConfig | None = None,
               audit: AuditLog | None = None, branch_tag: str = "") -> tuple[KBEdit, list[Trajectory]]:
    """One actor per gradient; returns the pooled edit and all trajectories."""
    trajectories = []
    for gradient in sorted(gradients, key=lambda g: g.doc_id):
        if gradient.creates_document:
            seed = Document(id=NONE_FILE, chunks=())
            trajectories.append(
                edit_document(seed, gradient, gateway, config, audit, branch_tag)
            )
        else:
            doc = state_docs.get(gradient.doc_id)
            if doc is None:
                (audit or AuditLog()).add("gradient_doc_missing", doc_id=gradient.doc_id)
                continue
            trajectories.append(
                edit_document(doc, gradient, gateway, config, audit, branch_tag)
            )
    return pool_edits(trajectories), trajectories
