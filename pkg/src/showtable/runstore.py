"""Durable run storage: content-addressed blobs and atomically written
JSON documents, safe under concurrent writers.

Layout:
    <root>/blobs/<sha256>
    <root>/runs/<instance_id>/run.json
    <root>/runs/<instance_id>/scores.json
    <root>/runs/<instance_id>/audits/<dim>.json
    <root>/datagen/<pipeline>/<batch>.jsonl
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LAYOUT_VERSION = 1

_TMP_PREFIX = ".tmp-"
_SEGMENT_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9._-]*")
_HEX64_RE = re.compile(r"^[0-9a-f]{64}$")

# Document keys whose string values reference blobs by digest.
_REFERENCE_SUFFIXES = ("_image", "_sha256")
_REFERENCE_KEYS = {"winner", "loser", "input_image", "output_image", "initial_image", "final_image"}


def safe_segment(value: str) -> str:
    """Reduce an arbitrary id to a filesystem-safe path segment."""
    cleaned = re.sub(r"[^A-Za-z0-9._-]", "_", value).lstrip(".")
    return cleaned or "_"


@dataclass
class Violation:
    kind: str  # digest_mismatch | dangling_reference | unreadable
    path: str
    detail: str


class RunStore:
    """Directory-backed store; all writes go through temp-file + rename."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.layout_version = LAYOUT_VERSION
        self.blobs_dir = self.root / "blobs"
        self.blobs_dir.mkdir(parents=True, exist_ok=True)
        self._append_lock = threading.Lock()
        self._clean_temps()

    def _clean_temps(self) -> None:
        for tmp in self.root.rglob(f"{_TMP_PREFIX}*"):
            try:
                tmp.unlink()
                logger.debug("removed leftover temp file %s", tmp)
            except OSError:
                pass

    # -- blobs ---------------------------------------------------------------

    def put_blob(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        target = self.blobs_dir / digest
        if target.exists():
            return digest
        tmp = self.blobs_dir / f"{_TMP_PREFIX}{uuid.uuid4().hex}"
        tmp.write_bytes(data)
        os.replace(tmp, target)
        return digest

    def has_blob(self, digest: str) -> bool:
        return (self.blobs_dir / digest).is_file()

    def get_blob(self, digest: str) -> bytes:
        return (self.blobs_dir / digest).read_bytes()

    def blob_path(self, digest: str) -> Path:
        return self.blobs_dir / digest

    # -- documents -----------------------------------------------------------

    def _resolve(self, key: str) -> Path:
        parts = key.split("/")
        if not parts or any(not _SEGMENT_RE.fullmatch(p) for p in parts):
            raise ValueError(f"unsafe document key: {key!r}")
        return self.root.joinpath(*parts)

    def write_document(self, key: str, document: dict) -> None:
        """Atomically replace the document at ``key`` (last writer wins)."""
        path = self._resolve(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = dict(document)
        doc.setdefault("schema_version", SCHEMA_VERSION)
        payload = (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode("utf-8")
        tmp = path.parent / f"{_TMP_PREFIX}{uuid.uuid4().hex}"
        tmp.write_bytes(payload)
        os.replace(tmp, path)

    def read_document(self, key: str) -> dict | None:
        path = self._resolve(key)
        if not path.is_file():
            return None
        return json.loads(path.read_text("utf-8"))

    def append_jsonl(self, key: str, record: dict) -> None:
        path = self._resolve(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        line = json.dumps(record, sort_keys=True) + "\n"
        with self._append_lock:
            with open(path, "a", encoding="utf-8") as handle:
                handle.write(line)

    def list_documents(self, prefix: str = "runs") -> list[str]:
        base = self._resolve(prefix) if prefix else self.root
        if not base.exists():
            return []
        keys = []
        for path in sorted(base.rglob("*")):
            if path.is_file() and path.suffix in (".json", ".jsonl") and not path.name.startswith(_TMP_PREFIX):
                keys.append(str(path.relative_to(self.root)))
        return keys

    # -- integrity -----------------------------------------------------------

    def verify(self) -> list[Violation]:
        """Re-hash every blob and check all digest references in documents."""
        violations: list[Violation] = []
        for blob in sorted(self.blobs_dir.iterdir()):
            if blob.name.startswith(_TMP_PREFIX) or not blob.is_file():
                continue
            actual = hashlib.sha256(blob.read_bytes()).hexdigest()
            if actual != blob.name:
                violations.append(Violation("digest_mismatch", str(blob), f"content hashes to {actual}"))
        for key in self.list_documents("runs") + self.list_documents("datagen"):
            path = self.root / key
            try:
                if path.suffix == ".jsonl":
                    docs = [json.loads(ln) for ln in path.read_text("utf-8").splitlines() if ln.strip()]
                else:
                    docs = [json.loads(path.read_text("utf-8"))]
            except (OSError, json.JSONDecodeError) as exc:
                violations.append(Violation("unreadable", str(path), str(exc)))
                continue
            for doc in docs:
                for ref in _blob_references(doc):
                    if not self.has_blob(ref):
                        violations.append(Violation("dangling_reference", str(path), ref))
        return violations


def _blob_references(node: object, key: str | None = None) -> list[str]:
    refs: list[str] = []
    if isinstance(node, dict):
        for k, v in node.items():
            refs.extend(_blob_references(v, k))
    elif isinstance(node, list):
        for item in node:
            refs.extend(_blob_references(item, key))
    elif isinstance(node, str) and key is not None and _HEX64_RE.match(node):
        if key in _REFERENCE_KEYS or any(key.endswith(suffix) for suffix in _REFERENCE_SUFFIXES):
            refs.append(node)
    return refs


def verify_store(store: RunStore) -> list[Violation]:
    return store.verify()
