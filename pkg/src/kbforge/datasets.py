"""Dataset loaders: problem-directory code benchmarks and timestamped news QA.

Two on-disk layouts are supported.

Problem-directory ("arks" format) - code generation with an execution oracle:

    dataset/
      problems/<id>/question.md|question.txt   the task statement
      problems/<id>/test_bench.*               optional; scored by running it
      problems/<id>/answer.txt                 optional; scored by string match
      problems/<id>/feedback.txt               optional expert feedback

Timestamped news QA ("clark-news" format) - factual updates:

    dataset/
      articles.jsonl    {"id", "timestamp", "title", "text"}
      questions.jsonl   {"id", "question", "answers": [{"timestamp", "answer"}, ...]}

For news QA, only questions whose answer changed at least once are pooled;
each uses its first changed answer as the expected answer, and an expert
feedback line carrying the updated fact is synthesized when none is given
(reflection requires feedback to work from).
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError
from .rag import TrainExample

FORMATS = ("arks", "clark-news")

_ARKS_LAYOUT = (
    "expected layout: <dataset>/problems/<id>/question.md (or .txt), with "
    "optional test_bench.*, answer.txt, feedback.txt per problem"
)
_CLARK_LAYOUT = (
    "expected layout: <dataset>/articles.jsonl and <dataset>/questions.jsonl "
    "(one JSON object per line)"
)


def load_dataset(dataset_dir: str | Path, fmt: str) -> list[TrainExample]:
    if fmt == "arks":
        return load_arks(dataset_dir)
    if fmt == "clark-news":
        return load_clark_news(dataset_dir)
    raise ConfigError(f"unknown dataset format {fmt!r}; expected one of {FORMATS}")


# --- problem directories -----------------------------------------------------


def load_arks(dataset_dir: str | Path) -> list[TrainExample]:
    root = Path(dataset_dir)
    problems = root / "problems"
    if not problems.is_dir():
        raise ConfigError(f"{root} has no problems/ directory; {_ARKS_LAYOUT}")
    examples = []
    for problem_dir in sorted(p for p in problems.iterdir() if p.is_dir()):
        question = _first_existing(problem_dir, ["question.md", "question.txt"])
        if question is None:
            raise ConfigError(f"{problem_dir} has no question.md or question.txt; {_ARKS_LAYOUT}")
        benches = sorted(problem_dir.glob("test_bench.*"))
        answer = problem_dir / "answer.txt"
        if benches:
            correct = str(benches[0].resolve())
        elif answer.exists():
            correct = answer.read_text(encoding="utf-8").strip()
        else:
            raise ConfigError(
                f"{problem_dir} has neither a test bench nor answer.txt; {_ARKS_LAYOUT}"
            )
        feedback_file = problem_dir / "feedback.txt"
        examples.append(TrainExample(
            example_id=problem_dir.name,
            query=question.read_text(encoding="utf-8").strip(),
            correct=correct,
            expert_feedback=(
                feedback_file.read_text(encoding="utf-8").strip()
                if feedback_file.exists() else ""
            ),
        ))
    if not examples:
        raise ConfigError(f"{problems} contains no problem directories; {_ARKS_LAYOUT}")
    return examples


def _first_existing(directory: Path, names: list[str]) -> Path | None:
    for name in names:
        if (directory / name).exists():
            return directory / name
    return None


# --- timestamped news QA ------------------------------------------------------


def _read_jsonl(path: Path, what: str) -> list[dict]:
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{lineno}: malformed {what} record: {exc}") from exc
    return rows


def load_clark_news(dataset_dir: str | Path) -> list[TrainExample]:
    root = Path(dataset_dir)
    questions_path = root / "questions.jsonl"
    if not questions_path.exists():
        raise ConfigError(f"{root} has no questions.jsonl; {_CLARK_LAYOUT}")
    examples = []
    for row in _read_jsonl(questions_path, "question"):
        try:
            answers = sorted(row["answers"], key=lambda a: a["timestamp"])
            question = row["question"]
            qid = str(row["id"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{questions_path}: question record missing {exc}") from exc
        changed = _first_change(answers)
        if changed is None:
            continue  # answer never changed; nothing to update
        examples.append(TrainExample(
            example_id=qid,
            query=question,
            correct=changed["answer"],
            expert_feedback=row.get(
                "feedback",
                f"As of {changed['timestamp']}, the correct answer is: {changed['answer']}.",
            ),
        ))
    if not examples:
        raise ConfigError(
            f"{questions_path} has no questions with changed answers; {_CLARK_LAYOUT}"
        )
    return examples


def _first_change(answers: list[dict]) -> dict | None:
    if len(answers) < 2:
        return None
    first = answers[0]["answer"]
    for entry in answers[1:]:
        if entry["answer"] != first:
            return entry
    return None


def materialize_clark_kb(dataset_dir: str | Path, kb_dir: str | Path) -> int:
    """Write the article corpus as markdown files; returns the article count."""
    root = Path(dataset_dir)
    articles_path = root / "articles.jsonl"
    if not articles_path.exists():
        raise ConfigError(f"{root} has no articles.jsonl; {_CLARK_LAYOUT}")
    kb_root = Path(kb_dir) / "articles"
    kb_root.mkdir(parents=True, exist_ok=True)
    count = 0
    for row in _read_jsonl(articles_path, "article"):
        try:
            body = f"# {row['title']}\n\n{row['text']}\n"
            (kb_root / f"{row['id']}.md").write_text(body, encoding="utf-8")
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{articles_path}: article record missing {exc}") from exc
        count += 1
    return count


# --- canonical ingested form -----------------------------------------------------


def write_canonical(examples: list[TrainExample], splits: dict[str, list[str]],
                    out_dir: str | Path, seed: int) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "examples.jsonl").open("w", encoding="utf-8") as fh:
        for example in examples:
            fh.write(json.dumps(example.to_json(), ensure_ascii=False) + "\n")
    (out / "splits.json").write_text(
        json.dumps({"seed": seed, **splits}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return out / "examples.jsonl"


def read_canonical(dataset_dir: str | Path) -> tuple[list[TrainExample], dict[str, list[str]]]:
    root = Path(dataset_dir)
    examples_path = root / "examples.jsonl"
    splits_path = root / "splits.json"
    if not examples_path.exists() or not splits_path.exists():
        raise ConfigError(
            f"{root} is not an ingested dataset (need examples.jsonl + splits.json); "
            "run `kbforge ingest` first"
        )
    examples = [TrainExample.from_json(r) for r in _read_jsonl(examples_path, "example")]
    splits = json.loads(splits_path.read_text(encoding="utf-8"))
    return examples, splits


def split_examples(examples: list[TrainExample],
                   splits: dict[str, list[str]]) -> dict[str, list[TrainExample]]:
    by_id = {e.example_id: e for e in examples}
    return {
        name: [by_id[i] for i in splits.get(name, [])]
        for name in ("train", "eval", "test")
    }
