"""UCT Monte Carlo tree search over knowledge base states.

Each node is one KB state; a node's "simulation" is the deterministic
evaluation of the training examples against that state (temperature 0), so
rewards come straight from the RAG engine. Expansion runs the critic and the
actors over the node's failing examples several independent times (branch
tags keep the samples distinct), patches the state with each pooled edit,
and dedupes children by state fingerprint. The tree checkpoints to JSON
after every iteration and can resume mid-run.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .audit import AuditLog
from .errors import (
    ConfigError,
    ContextOverflow,
    KBForgeError,
    NoChildren,
    ReplayMiss,
)
from .kb import KBEdit, KBState, apply_edit
from .snapshots import SnapshotStore


@dataclass(frozen=True)
class SearchParams:
    max_depth: int = 3
    expansion_width: int = 3
    iterations: int = 5
    uct_constant: float = 2.5

    def __post_init__(self):
        if min(self.max_depth, self.expansion_width) <= 0 or self.iterations < 0:
            raise ValueError("search parameters must be positive")
        if self.uct_constant < 0:
            raise ValueError("uct_constant must be non-negative")

    def to_json(self) -> dict:
        return {
            "max_depth": self.max_depth,
            "expansion_width": self.expansion_width,
            "iterations": self.iterations,
            "uct_constant": self.uct_constant,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SearchParams":
        return cls(**data)


class SearchNode:
    def __init__(self, node_id: int, fingerprint: str, depth: int, reward: float,
                 failure_ids: tuple[str, ...], parent: "SearchNode | None" = None):
        self.id = node_id
        self.fingerprint = fingerprint
        self.depth = depth
        self.reward = reward
        self.failure_ids = tuple(failure_ids)
        self.parent = parent
        self.children: list[SearchNode] = []
        self.visits = 0  # N
        self.value_sum = 0.0  # W

    def mean_value(self) -> float:
        return self.value_sum / self.visits if self.visits else 0.0

    def is_expandable(self, params: SearchParams) -> bool:
        return (
            self.depth < params.max_depth
            and bool(self.failure_ids)
            and len(self.children) < params.expansion_width
        )

    def ancestors(self) -> "list[SearchNode]":
        out = []
        node = self
        while node is not None:
            out.append(node)
            node = node.parent
        return out


def uct_select(node: SearchNode, c: float) -> SearchNode:
    """Pick the child maximizing W/N + c*sqrt(ln(N_parent)/N).

    Unvisited children rank as +infinity and are taken in creation order;
    exact ties also break by creation order.
    """
    if not node.children:
        raise NoChildren(f"node {node.id} has no children")
    unvisited = [ch for ch in node.children if ch.visits == 0]
    if unvisited:
        return min(unvisited, key=lambda ch: ch.id)
    log_parent = math.log(max(node.visits, 1))

    def value(ch: SearchNode) -> float:
        return ch.value_sum / ch.visits + c * math.sqrt(log_parent / ch.visits)

    return sorted(node.children, key=lambda ch: (-value(ch), ch.id))[0]


def backpropagate(leaf: SearchNode, reward: float) -> None:
    for node in leaf.ancestors():
        node.visits += 1
        node.value_sum += reward


class Pipeline(Protocol):
    """What the search needs from the evaluate/critic/actor machinery."""

    def evaluate(self, state: KBState, examples: list) -> "object": ...

    def propose_edit(self, state: KBState, examples: list, failure_ids: tuple[str, ...],
                     branch_tag: str) -> tuple[KBEdit, dict]: ...


class SearchTree:
    def __init__(self, params: SearchParams):
        self.params = params
        self.nodes: list[SearchNode] = []
        self.by_fingerprint: dict[str, SearchNode] = {}
        self.root: SearchNode | None = None
        self.iterations_done = 0

    def new_node(self, fingerprint: str, depth: int, reward: float,
                 failure_ids: tuple[str, ...], parent: SearchNode | None) -> SearchNode:
        node = SearchNode(len(self.nodes), fingerprint, depth, reward, failure_ids, parent)
        self.nodes.append(node)
        self.by_fingerprint[fingerprint] = node
        return node

    def best_node(self) -> SearchNode:
        return sorted(self.nodes, key=lambda n: (-n.reward, n.depth, n.id))[0]

    def select_expandable(self) -> SearchNode | None:
        node = self.root
        while node is not None:
            if node.is_expandable(self.params):
                return node
            if not node.children:
                return None
            node = uct_select(node, self.params.uct_constant)
        return None

    # -- persistence --

    def to_json(self) -> dict:
        return {
            "params": self.params.to_json(),
            "iterations_done": self.iterations_done,
            "root": self.root.id if self.root else None,
            "nodes": [
                {
                    "id": n.id,
                    "fingerprint": n.fingerprint,
                    "depth": n.depth,
                    "reward": n.reward,
                    "visits": n.visits,
                    "value_sum": n.value_sum,
                    "parent": n.parent.id if n.parent else None,
                    "children": [ch.id for ch in n.children],
                    "failures": list(n.failure_ids),
                }
                for n in self.nodes
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "SearchTree":
        tree = cls(SearchParams.from_json(data["params"]))
        tree.iterations_done = data["iterations_done"]
        for rec in sorted(data["nodes"], key=lambda r: r["id"]):
            node = SearchNode(
                rec["id"], rec["fingerprint"], rec["depth"], rec["reward"],
                tuple(rec["failures"]),
            )
            node.visits = rec["visits"]
            node.value_sum = rec["value_sum"]
            tree.nodes.append(node)
            tree.by_fingerprint.setdefault(rec["fingerprint"], node)
        for rec in data["nodes"]:
            node = tree.nodes[rec["id"]]
            if rec["parent"] is not None:
                node.parent = tree.nodes[rec["parent"]]
            node.children = [tree.nodes[i] for i in rec["children"]]
        if data["root"] is not None:
            tree.root = tree.nodes[data["root"]]
        return tree


def expand(node: SearchNode, width: int, tree: SearchTree, states: dict[str, KBState],
           pipeline: Pipeline, examples: list, iteration: int,
           store: SnapshotStore | None = None, audit: AuditLog | None = None,
           edit_log: list | None = None) -> list[tuple[SearchNode, float]]:
    """Generate up to `width` children for `node`; returns (child, reward) pairs
    for newly evaluated children (dedup hits add an edge and nothing else)."""
    audit = audit or AuditLog()
    if node.depth >= tree.params.max_depth or not node.failure_ids:
        return []
    state = states[node.fingerprint]
    ancestor_fps = {a.fingerprint for a in node.ancestors()}
    new_children: list[tuple[SearchNode, float]] = []

    for slot in range(width):
        branch_tag = f"i{iteration}.s{slot}"
        try:
            edit, provenance = pipeline.propose_edit(state, examples, node.failure_ids, branch_tag)
            child_state = apply_edit(state, edit)
        except (ReplayMiss, ContextOverflow, ConfigError):
            raise
        except KBForgeError as exc:
            audit.add("expansion_slot_skipped", iteration=iteration, slot=slot, error=str(exc))
            continue

        fp = child_state.fingerprint
        if fp in ancestor_fps:
            audit.add("dedup_ancestor", iteration=iteration, slot=slot, fingerprint=fp)
            continue
        existing = tree.by_fingerprint.get(fp)
        if existing is not None:
            if existing not in node.children:
                node.children.append(existing)
            audit.add("dedup_transposition", iteration=iteration, slot=slot, fingerprint=fp)
            continue

        states[fp] = child_state
        report = pipeline.evaluate(child_state, examples)
        child = tree.new_node(
            fingerprint=fp,
            depth=node.depth + 1,
            reward=report.reward,
            failure_ids=tuple(r.example_id for r in report.failing()),
            parent=node,
        )
        node.children.append(child)
        if store is not None:
            store.save(child_state, parent=node.fingerprint, edit=edit)
        if edit_log is not None:
            edit_log.append({
                "iteration": iteration,
                "slot": slot,
                "parent": node.fingerprint,
                "child": fp,
                "reward": report.reward,
                "provenance": provenance,
            })
        new_children.append((child, report.reward))
    return new_children


@dataclass
class SearchOutcome:
    best_state: KBState
    tree: SearchTree
    report: dict


def run_search(initial_state: KBState, examples: list, params: SearchParams,
               pipeline: Pipeline, store: SnapshotStore | None = None,
               checkpoint_path: str | Path | None = None,
               audit: AuditLog | None = None,
               edit_log: list | None = None,
               resume_tree: SearchTree | None = None,
               states: dict[str, KBState] | None = None) -> SearchOutcome:
    """Iterate select -> expand -> backpropagate and return the best state seen.

    The best node is the highest evaluated reward, ties going to shallower
    depth then earlier creation; the root is always a candidate, so the
    result is never worse than the input. With a checkpoint path, the tree is
    persisted after every iteration and a crashed run can resume from it.
    """
    audit = audit or AuditLog()
    states = states if states is not None else {}

    if resume_tree is not None:
        tree = resume_tree
        if store is not None:
            for node in tree.nodes:
                if node.fingerprint not in states:
                    states[node.fingerprint] = store.load(node.fingerprint)
    else:
        tree = SearchTree(params)
        states[initial_state.fingerprint] = initial_state
        report = pipeline.evaluate(initial_state, examples)
        tree.root = tree.new_node(
            fingerprint=initial_state.fingerprint,
            depth=0,
            reward=report.reward,
            failure_ids=tuple(r.example_id for r in report.failing()),
            parent=None,
        )
        if store is not None:
            store.save(initial_state)
        _checkpoint(tree, checkpoint_path)

    for iteration in range(tree.iterations_done + 1, params.iterations + 1):
        node = tree.select_expandable()
        if node is None:
            audit.add("iteration_idle", iteration=iteration)
        else:
            width = params.expansion_width - len(node.children)
            for child, reward in expand(
                node, width, tree, states, pipeline, examples, iteration,
                store=store, audit=audit, edit_log=edit_log,
            ):
                backpropagate(child, reward)
        tree.iterations_done = iteration
        _checkpoint(tree, checkpoint_path)

    best = tree.best_node()
    report = {
        "iterations_done": tree.iterations_done,
        "node_count": len(tree.nodes),
        "root_fingerprint": tree.root.fingerprint,
        "root_reward": tree.root.reward,
        "best_fingerprint": best.fingerprint,
        "best_reward": best.reward,
        "best_depth": best.depth,
    }
    return SearchOutcome(best_state=states[best.fingerprint], tree=tree, report=report)


def _checkpoint(tree: SearchTree, path: str | Path | None) -> None:
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(tree.to_json(), sort_keys=True, indent=2) + "\n",
                   encoding="utf-8")
    os.replace(tmp, path)


class KBEditPipeline:
    """Production pipeline: RAG evaluation + critic + actors."""

    def __init__(self, engine, critic, gateway, actor_config=None, audit: AuditLog | None = None):
        from .actor import ActorConfig, run_actors  # local import to avoid cycles

        self.engine = engine
        self.critic = critic
        self.gateway = gateway
        self.actor_config = actor_config or ActorConfig()
        self.audit = audit or AuditLog()
        self._run_actors = run_actors

    def evaluate(self, state: KBState, examples: list):
        return self.engine.evaluate_state(state, examples)

    def propose_edit(self, state: KBState, examples: list, failure_ids: tuple[str, ...],
                     branch_tag: str) -> tuple[KBEdit, dict]:
        report = self.engine.evaluate_state(state, examples)  # cache hit on revisits
        by_id = {e.example_id: e for e in examples}
        failures = [
            (by_id[r.example_id], r)
            for r in report.per_example
            if r.example_id in failure_ids
        ]
        doc_texts = {d.id: d.text for d in state.docs}
        gradients, trace = self.critic.generate_gradients(failures, doc_texts, branch_tag)
        edit, trajectories = self._run_actors(
            dict(state.documents), gradients, self.gateway,
            config=self.actor_config, audit=self.audit, branch_tag=branch_tag,
        )
        provenance = {
            "branch_tag": branch_tag,
            "gradients": [
                {"doc_id": g.doc_id, "text": g.gradient_text,
                 "examples": list(g.supporting_example_ids), "degraded": g.degraded}
                for g in gradients
            ],
            "trajectories": [
                {"doc_id": t.doc_id, "steps": len(t.steps), "aborted": t.aborted,
                 "illegal_steps": t.illegal_steps}
                for t in trajectories
            ],
            "skipped_examples": trace["skipped"],
        }
        return edit, provenance
