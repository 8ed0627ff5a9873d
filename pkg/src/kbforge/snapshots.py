"""Content-addressed snapshot store for knowledge base states.

Layout under the store root:

    manifest.json            digest -> {parent, edit} lineage
    <digest>/files/<docId>   browsable document tree (UTF-8 bytes)
    <digest>/chunks.json     per-document chunk boundaries (byte lengths)

Chunk boundaries are stored as UTF-8 byte lengths so a reload reconstructs
the exact chunk structure and therefore the exact fingerprint; loads verify
the digest and refuse corrupted snapshots.
"""

from __future__ import annotations

import json
import os
from pathlib import Path, PurePosixPath

from .errors import KBForgeError
from .kb import Chunk, Document, KBEdit, KBState, edit_from_json, edit_to_json


class SnapshotCorrupt(KBForgeError):
    """Stored snapshot does not re-fingerprint to its digest."""


def _check_doc_id(doc_id: str) -> PurePosixPath:
    p = PurePosixPath(doc_id)
    if p.is_absolute() or ".." in p.parts or not p.parts:
        raise KBForgeError(f"unsafe document id: {doc_id!r}")
    return p


class SnapshotStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._manifest_path = self.root / "manifest.json"

    # -- manifest -------------------------------------------------------------

    def manifest(self) -> dict:
        if self._manifest_path.exists():
            return json.loads(self._manifest_path.read_text(encoding="utf-8"))
        return {"states": {}}

    def _write_manifest(self, manifest: dict) -> None:
        tmp = self._manifest_path.with_suffix(".tmp")
        tmp.write_text(
            json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        os.replace(tmp, self._manifest_path)

    # -- snapshots ------------------------------------------------------------

    def has(self, digest: str) -> bool:
        return (self.root / digest / "chunks.json").exists()

    def save(self, state: KBState, parent: str | None = None, edit: KBEdit | None = None) -> str:
        """Persist `state`; records lineage in the manifest. Idempotent."""
        digest = state.fingerprint
        state_dir = self.root / digest
        if not self.has(digest):
            files_dir = state_dir / "files"
            boundaries: dict[str, list[dict]] = {}
            for doc in state.docs:
                rel = _check_doc_id(doc.id)
                path = files_dir / rel
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(doc.text.encode("utf-8"))
                boundaries[doc.id] = [
                    {"name": c.name, "bytes": len(c.text.encode("utf-8")), "origin": c.origin}
                    for c in doc.chunks
                ]
            (state_dir / "chunks.json").write_text(
                json.dumps(boundaries, sort_keys=True, indent=2) + "\n", encoding="utf-8"
            )
        manifest = self.manifest()
        entry = {"parent": parent, "edit": edit_to_json(edit) if edit is not None else None}
        if manifest["states"].get(digest) != entry:
            # Keep the first recorded lineage; a state can be reached twice.
            manifest["states"].setdefault(digest, entry)
            self._write_manifest(manifest)
        return digest

    def load(self, digest: str) -> KBState:
        state_dir = self.root / digest
        chunks_path = state_dir / "chunks.json"
        if not chunks_path.exists():
            raise KBForgeError(f"no snapshot for digest {digest!r}")
        boundaries = json.loads(chunks_path.read_text(encoding="utf-8"))
        docs = []
        for doc_id, chunk_meta in sorted(boundaries.items()):
            raw = (state_dir / "files" / _check_doc_id(doc_id)).read_bytes()
            chunks = []
            offset = 0
            for meta in chunk_meta:
                end = offset + meta["bytes"]
                chunks.append(
                    Chunk(meta["name"], raw[offset:end].decode("utf-8"), meta.get("origin", "original"))
                )
                offset = end
            if offset != len(raw):
                raise SnapshotCorrupt(f"{digest}/{doc_id}: trailing bytes")
            docs.append(Document(id=doc_id, chunks=tuple(chunks)))
        state = KBState.from_documents(docs)
        if state.fingerprint != digest:
            raise SnapshotCorrupt(
                f"snapshot {digest} re-fingerprints to {state.fingerprint}"
            )
        return state

    def edit_for(self, digest: str) -> KBEdit | None:
        entry = self.manifest()["states"].get(digest)
        if entry is None or entry.get("edit") is None:
            return None
        return edit_from_json(entry["edit"])

    def parent_of(self, digest: str) -> str | None:
        entry = self.manifest()["states"].get(digest)
        return entry.get("parent") if entry else None
