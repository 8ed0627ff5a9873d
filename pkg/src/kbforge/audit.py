"""Append-only audit log for degraded-mode events and normalized LLM output.

Anything the system silently corrects (demoted selections, clamped judge
scores, dropped entries, dedup hits) lands here so runs stay inspectable.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path


class AuditLog:
    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.entries: list[dict] = []
        self._lock = threading.Lock()

    def add(self, kind: str, **fields) -> None:
        entry = {"kind": kind, **fields}
        with self._lock:
            self.entries.append(entry)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")

    def of_kind(self, kind: str) -> list[dict]:
        with self._lock:
            return [e for e in self.entries if e["kind"] == kind]
