"""Run configuration: one validated object holding every knob of a run.

Defaults mirror the standard system configuration (search depth 3, width 3,
5 iterations, UCT constant 2.5, retrieval chunks of at most 7500 tokens under
an 18000-token budget, 50-line editing chunks, temperature 0).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError
from .gateway import ProviderProfile
from .mcts import SearchParams
from .rag import SCORERS, ScorerConfig

MODES = ("live", "record", "replay")


@dataclass
class RunConfig:
    kb_dir: str = ""
    dataset_dir: str = ""
    out_dir: str = ""
    mode: str = "replay"
    seed: int = 0

    task: str = "question answering"
    task_desc: str = "answer user questions from the knowledge base"
    kb_desc: str = "a directory of text documents"

    search: SearchParams = field(default_factory=SearchParams)
    max_chunk_tokens: int = 7500
    token_budget: int = 18000
    iterative_retrieval: bool = False
    lines_per_chunk: int = 50

    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    provider: ProviderProfile = field(default_factory=ProviderProfile)
    judge_model: str = ""  # override judge; defaults to the provider model

    max_edited_files: int = 2
    actor_max_steps: int = 8
    max_workers: int = 1

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.scorer.kind not in SCORERS:
            raise ConfigError(f"scorer must be one of {SCORERS}, got {self.scorer.kind!r}")
        if self.scorer.kind == "execution_harness" and not self.scorer.harness_cmd:
            raise ConfigError("execution_harness scorer needs scorer.harness_cmd")
        for name in ("max_chunk_tokens", "token_budget", "lines_per_chunk",
                     "actor_max_steps", "max_edited_files", "max_workers"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.mode == "live" and self.provider.is_mock:
            raise ConfigError("live mode needs a provider profile with a base_url")

    def validate_for_search(self) -> None:
        self.validate()
        if not self.kb_dir or not Path(self.kb_dir).is_dir():
            raise ConfigError(f"kb_dir is not a directory: {self.kb_dir!r}")
        if not self.dataset_dir:
            raise ConfigError("dataset_dir is required")

    # -- (de)serialization --

    def to_json(self) -> dict:
        data = asdict(self)
        data["search"] = self.search.to_json()
        return data

    @classmethod
    def from_json(cls, data: dict) -> "RunConfig":
        data = dict(data)
        if "search" in data:
            data["search"] = SearchParams.from_json(data["search"])
        if "scorer" in data:
            data["scorer"] = ScorerConfig(**data["scorer"])
        if "provider" in data:
            data["provider"] = ProviderProfile.from_dict(data["provider"])
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            return cls.from_json(json.loads(path.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
