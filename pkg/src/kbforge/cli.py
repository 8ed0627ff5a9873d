"""Command line entry point: ingest datasets, run the search, evaluate runs.

A search run is self-contained under its output directory:

    runs/<name>/
      config.json        the exact configuration used
      tree.json          search tree checkpoint (resume target)
      store/             content-addressed KB snapshots + edit manifest
      transcripts/       chat transcript (record mode) + evaluation log
      edit_log.json      applied edits with critic/actor provenance
      audit.jsonl        degraded-mode and normalization events
      report.json        search summary + metrics
      best_kb/           the best state as a browsable file tree

Exit codes: 0 ok, 2 configuration error, 3 provider error, 4 replay miss.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click

from . import datasets as ds
from .actor import ActorConfig
from .audit import AuditLog
from .config import RunConfig
from .critic import Critic, CriticConfig
from .errors import ConfigError, KBForgeError, ProviderError, ReplayMiss
from .gateway import Gateway, MockEmbedder, ProviderProfile, make_gateway
from .kb import ChunkPolicy, KBState, load_kb_dir, write_kb_dir
from .mcts import KBEditPipeline, SearchTree, run_search
from .metrics import MetricReport, coherence, completeness, document_diff_text, generalization, split_dataset
from .rag import EngineConfig, RagEngine
from .retrieval import IndexCache
from .snapshots import SnapshotStore


# --- component wiring -----------------------------------------------------------


def _chunk_policy(config: RunConfig) -> ChunkPolicy:
    return ChunkPolicy(lines_per_chunk=config.lines_per_chunk)


def _build_gateway(config: RunConfig, run_dir: Path,
                   replay_paths: list[Path] | None) -> Gateway:
    embedder = None
    if config.provider.is_mock:
        embedder = MockEmbedder(config.provider.dimension, seed=config.seed)
    transcript = run_dir / "transcripts" / "chat.jsonl"
    paths = list(replay_paths) if replay_paths else [transcript]
    return make_gateway(config.mode, config.provider, transcript_path=transcript,
                        replay_paths=paths, embedder=embedder)


def _build_engine(config: RunConfig, gateway: Gateway, run_dir: Path | None) -> RagEngine:
    index_cache = IndexCache(gateway, max_chunk_tokens=config.max_chunk_tokens)
    engine_config = EngineConfig(
        task=config.task,
        task_desc=config.task_desc,
        kb_desc=config.kb_desc,
        token_budget=config.token_budget,
        iterative_retrieval=config.iterative_retrieval,
        scorer=config.scorer,
        max_workers=config.max_workers,
    )
    eval_log = run_dir / "transcripts" / "evaluations.jsonl" if run_dir else None
    return RagEngine(gateway, index_cache, engine_config, eval_log_path=eval_log)


def _build_critic(config: RunConfig, gateway: Gateway, audit: AuditLog) -> Critic:
    return Critic(gateway, CriticConfig(
        task=config.task,
        task_desc=config.task_desc,
        kb_desc=config.kb_desc,
        max_edited_files=config.max_edited_files,
        show_test_bench=config.scorer.kind == "execution_harness",
    ), audit)


def _judge_gateway(config: RunConfig, gateway: Gateway, run_dir: Path,
                   replay_paths: list[Path] | None) -> Gateway:
    if not config.judge_model or config.judge_model == config.provider.model:
        return gateway
    judge_profile = ProviderProfile.from_dict(
        {**config.provider.__dict__, "model": config.judge_model}
    )
    judge_config = RunConfig.from_json({**config.to_json(), "provider": judge_profile.__dict__})
    return _build_gateway(judge_config, run_dir, replay_paths)


# --- commands ---------------------------------------------------------------------


def cmd_ingest(dataset_dir: str | Path, fmt: str, config: RunConfig,
               gateway: Gateway | None = None,
               replay_paths: list[Path] | None = None) -> Path:
    """Load a source dataset, run the failure-first split, write canonical form."""
    config.validate()
    out_dir = Path(config.out_dir or Path(dataset_dir) / "ingested")
    out_dir.mkdir(parents=True, exist_ok=True)

    examples = ds.load_dataset(dataset_dir, fmt)
    if fmt == "clark-news" and config.kb_dir and not any(Path(config.kb_dir).glob("**/*")):
        count = ds.materialize_clark_kb(dataset_dir, config.kb_dir)
        click.echo(f"materialized {count} articles into {config.kb_dir}")

    if not config.kb_dir or not Path(config.kb_dir).is_dir():
        raise ConfigError("ingest needs kb_dir (the split runs the pipeline on the base KB)")
    state = load_kb_dir(config.kb_dir, _chunk_policy(config))
    gateway = gateway or _build_gateway(config, out_dir, replay_paths)
    engine = _build_engine(config, gateway, None)
    train, eval_split, test = split_dataset(examples, state, engine, seed=config.seed)
    splits = {
        "train": [e.example_id for e in train],
        "eval": [e.example_id for e in eval_split],
        "test": [e.example_id for e in test],
    }
    path = ds.write_canonical(examples, splits, out_dir, config.seed)
    click.echo(
        f"ingested {len(examples)} examples "
        f"(train {len(train)} / eval {len(eval_split)} / test {len(test)}) -> {path}"
    )
    return out_dir


def cmd_search(config: RunConfig, gateway: Gateway | None = None,
               replay_paths: list[Path] | None = None,
               resume_dir: str | Path | None = None) -> Path:
    """Run the full search and write a self-contained run directory."""
    resume_tree = None
    if resume_dir is not None:
        run_dir = Path(resume_dir)
        config = RunConfig.from_file(run_dir / "config.json")
        tree_path = run_dir / "tree.json"
        if tree_path.exists():
            resume_tree = SearchTree.from_json(json.loads(tree_path.read_text(encoding="utf-8")))
    else:
        run_dir = Path(config.out_dir) if config.out_dir else Path("runs") / time.strftime("%Y%m%d-%H%M%S")
        run_dir.mkdir(parents=True, exist_ok=True)
        config.out_dir = str(run_dir)
    config.validate_for_search()
    if resume_dir is None:
        config.save(run_dir / "config.json")

    examples, split_ids = ds.read_canonical(config.dataset_dir)
    split_map = ds.split_examples(examples, split_ids)
    if not split_map["train"]:
        raise ConfigError("train split is empty; nothing to optimize")

    audit = AuditLog(run_dir / "audit.jsonl")
    gateway = gateway or _build_gateway(config, run_dir, replay_paths)
    engine = _build_engine(config, gateway, run_dir)
    critic = _build_critic(config, gateway, audit)
    pipeline = KBEditPipeline(
        engine, critic, gateway,
        actor_config=ActorConfig(max_steps=config.actor_max_steps),
        audit=audit,
    )
    store = SnapshotStore(run_dir / "store")
    initial = load_kb_dir(config.kb_dir, _chunk_policy(config))

    edit_log: list = []
    outcome = run_search(
        initial, split_map["train"], config.search, pipeline,
        store=store, checkpoint_path=run_dir / "tree.json",
        audit=audit, edit_log=edit_log, resume_tree=resume_tree,
    )

    (run_dir / "edit_log.json").write_text(
        json.dumps(edit_log, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    best_dir = run_dir / "best_kb"
    write_kb_dir(outcome.best_state, best_dir)

    root_state = store.load(outcome.tree.root.fingerprint)
    metrics = MetricReport()
    metrics.completeness = completeness(engine, outcome.best_state, split_map["train"])
    if split_map["eval"]:
        metrics.eval_reward = 100.0 * engine.evaluate_state(
            outcome.best_state, split_map["eval"]
        ).reward
    if split_map["test"]:
        metrics.generalization = generalization(engine, outcome.best_state, split_map["test"])
    judge = _judge_gateway(config, gateway, run_dir, replay_paths)
    metrics.coherence, metrics.per_document_coherence = coherence(
        root_state, outcome.best_state, judge, audit
    )

    report = {"search": outcome.report, "metrics": metrics.to_json()}
    (run_dir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    click.echo(_format_report(report))
    return run_dir


def cmd_eval(run_dir: str | Path, split: str, gateway: Gateway | None = None,
             replay_paths: list[Path] | None = None) -> MetricReport:
    """Re-evaluate a finished run's best state on one split."""
    run_dir = Path(run_dir)
    for required in ("config.json", "report.json", "tree.json"):
        if not (run_dir / required).exists():
            raise ConfigError(f"{run_dir} is missing {required}; not a finished run")
    if split not in ("train", "eval", "test"):
        raise ConfigError(f"split must be train, eval, or test, got {split!r}")

    config = RunConfig.from_file(run_dir / "config.json")
    report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    store = SnapshotStore(run_dir / "store")
    best_state = store.load(report["search"]["best_fingerprint"])
    root_state = store.load(report["search"]["root_fingerprint"])

    examples, split_ids = ds.read_canonical(config.dataset_dir)
    subset = ds.split_examples(examples, split_ids)[split]
    if not subset:
        raise ConfigError(f"split {split!r} is empty")

    gateway = gateway or _build_gateway(config, run_dir, replay_paths)
    engine = _build_engine(config, gateway, None)
    audit = AuditLog()

    metrics = MetricReport()
    if split == "train":
        metrics.completeness = completeness(engine, best_state, subset)
    elif split == "eval":
        metrics.eval_reward = 100.0 * engine.evaluate_state(best_state, subset).reward
    else:
        metrics.generalization = generalization(engine, best_state, subset)
    judge = _judge_gateway(config, gateway, run_dir, replay_paths)
    metrics.coherence, metrics.per_document_coherence = coherence(
        root_state, best_state, judge, audit
    )
    click.echo(_format_metrics(metrics))
    return metrics


def inspect_tree(run_dir: str | Path) -> str:
    run_dir = Path(run_dir)
    tree_path = run_dir / "tree.json"
    if not tree_path.exists():
        raise ConfigError(f"{run_dir} has no tree.json")
    data = json.loads(tree_path.read_text(encoding="utf-8"))
    nodes = {n["id"]: n for n in data["nodes"]}
    lines = [f"iterations done: {data['iterations_done']}"]

    def render(node_id: int, prefix: str) -> None:
        n = nodes[node_id]
        lines.append(
            f"{prefix}[{n['id']}] reward={n['reward']:.4f} N={n['visits']} "
            f"W={n['value_sum']:.4f} depth={n['depth']} "
            f"failures={len(n['failures'])} fp={n['fingerprint'][:12]}"
        )
        for child_id in n["children"]:
            if nodes[child_id]["parent"] == node_id:
                render(child_id, prefix + "  ")
            else:
                lines.append(f"{prefix}  -> transposition to [{child_id}]")

    if data["root"] is not None:
        render(data["root"], "")
    return "\n".join(lines)


def diff_kb(run_dir: str | Path, fp_a: str, fp_b: str) -> str:
    store = SnapshotStore(Path(run_dir) / "store")
    state_a, state_b = store.load(fp_a), store.load(fp_b)
    ids = sorted(set(state_a.documents) | set(state_b.documents))
    parts = []
    for doc_id in ids:
        text = document_diff_text(state_a, state_b, doc_id) if doc_id in state_b.documents else (
            f"--- a/{doc_id}\n+++ (deleted)\n"
        )
        if text:
            parts.append(text)
    return "\n".join(parts) if parts else "(states are identical)"


def _format_metrics(metrics: MetricReport) -> str:
    rows = [
        ("completeness", metrics.completeness, "%"),
        ("eval accuracy", metrics.eval_reward, "%"),
        ("generalization", metrics.generalization, "%"),
        ("coherence", metrics.coherence, "/5"),
    ]
    lines = []
    for label, value, unit in rows:
        shown = "n/a" if value is None else f"{value:.2f}{unit}"
        lines.append(f"  {label:<16} {shown}")
    for doc_id, score in sorted(metrics.per_document_coherence.items()):
        lines.append(f"    coherence[{doc_id}] = {score:.1f}")
    return "\n".join(lines)


def _format_report(report: dict) -> str:
    s = report["search"]
    header = (
        f"search: {s['node_count']} nodes over {s['iterations_done']} iterations; "
        f"best reward {s['best_reward']:.4f} at depth {s['best_depth']} "
        f"(root was {s['root_reward']:.4f})"
    )
    metrics = MetricReport(
        completeness=report["metrics"]["completeness"],
        generalization=report["metrics"]["generalization"],
        eval_reward=report["metrics"]["eval_reward"],
        coherence=report["metrics"]["coherence"],
        per_document_coherence=report["metrics"]["per_document_coherence"],
    )
    return header + "\n" + _format_metrics(metrics)


# --- click wiring -----------------------------------------------------------------


def _exit_on(err: KBForgeError) -> None:
    if isinstance(err, ConfigError):
        click.echo(f"config error: {err}", err=True)
        sys.exit(2)
    if isinstance(err, ReplayMiss):
        click.echo(f"replay miss: {err}", err=True)
        sys.exit(4)
    if isinstance(err, ProviderError):
        click.echo(f"provider error: {err}", err=True)
        sys.exit(3)
    click.echo(f"error: {err}", err=True)
    sys.exit(1)


def _load_config(config_path: str | None, overrides: dict) -> RunConfig:
    config = RunConfig.from_file(config_path) if config_path else RunConfig()
    for key, value in overrides.items():
        if value is not None:
            setattr(config, key, value)
    return config


@click.group()
def main() -> None:
    """Repair a RAG knowledge base from expert feedback via tree search."""


@main.command("ingest")
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--format", "fmt", required=True, type=click.Choice(list(ds.FORMATS)))
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--kb", "kb_dir", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--mode", type=click.Choice(["live", "record", "replay"]), default=None)
@click.option("--transcripts", multiple=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
def ingest_cmd(dataset_dir, fmt, config_path, kb_dir, out_dir, mode, transcripts, seed):
    """Convert a source dataset into canonical examples + split manifest."""
    try:
        config = _load_config(config_path, {
            "kb_dir": kb_dir, "out_dir": out_dir, "mode": mode, "seed": seed,
        })
        cmd_ingest(dataset_dir, fmt, config,
                   replay_paths=[Path(p) for p in transcripts] or None)
    except KBForgeError as err:
        _exit_on(err)


@main.command("search")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--kb", "kb_dir", type=click.Path(), default=None)
@click.option("--dataset", "dataset_dir", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--mode", type=click.Choice(["live", "record", "replay"]), default=None)
@click.option("--transcripts", multiple=True, type=click.Path(exists=True))
@click.option("--resume", "resume_dir", type=click.Path(exists=True), default=None)
def search_cmd(config_path, kb_dir, dataset_dir, out_dir, mode, transcripts, resume_dir):
    """Run the repair search; writes a self-contained run directory."""
    try:
        config = _load_config(config_path, {
            "kb_dir": kb_dir, "dataset_dir": dataset_dir, "out_dir": out_dir, "mode": mode,
        })
        try:
            run_dir = cmd_search(config, replay_paths=[Path(p) for p in transcripts] or None,
                                 resume_dir=resume_dir)
        except KeyboardInterrupt:
            click.echo("interrupted; the last completed iteration is checkpointed. "
                       "Use `kbforge search --resume <run dir>` to continue.", err=True)
            sys.exit(130)
        click.echo(f"run directory: {run_dir}")
    except KBForgeError as err:
        _exit_on(err)


@main.command("eval")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--split", required=True, type=click.Choice(["train", "eval", "test"]))
@click.option("--transcripts", multiple=True, type=click.Path(exists=True))
@click.option("--json", "as_json", is_flag=True, default=False)
def eval_cmd(run_dir, split, transcripts, as_json):
    """Evaluate a finished run's best KB on one split."""
    try:
        metrics = cmd_eval(run_dir, split,
                           replay_paths=[Path(p) for p in transcripts] or None)
        if as_json:
            click.echo(json.dumps(metrics.to_json(), indent=2, sort_keys=True))
    except KBForgeError as err:
        _exit_on(err)


@main.command("inspect-tree")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
def inspect_tree_cmd(run_dir):
    """Print the search tree of a run."""
    try:
        click.echo(inspect_tree(run_dir))
    except KBForgeError as err:
        _exit_on(err)


@main.command("diff-kb")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.argument("fp_a")
@click.argument("fp_b")
def diff_kb_cmd(run_dir, fp_a, fp_b):
    """Show document diffs between two stored KB states."""
    try:
        click.echo(diff_kb(run_dir, fp_a, fp_b))
    except KBForgeError as err:
        _exit_on(err)


if __name__ == "__main__":
    main()
