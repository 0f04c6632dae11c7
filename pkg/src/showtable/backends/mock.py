"""Deterministic scripted backends for offline runs and tests.

Image operations never need scripting: generation stamps the prompt digest
into a tiny valid PNG, editing stamps (input digest, instruction, seed), and
aesthetic scores are hashed from the blob digest. Chat replies come from a
queue, then an optional responder function, so tests can script exact
sequences while the CLI --mock mode routes on prompt markers.
"""

from __future__ import annotations

import hashlib
import struct
import threading
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .base import (
    Backend,
    BackendConfig,
    ChatMessage,
    ImageBlob,
    ProtocolError,
    stable_blob_score,
)

_STAMP_SIZE = 8  # pixels per side of the stamp PNG


def _png_chunk(kind: bytes, payload: bytes) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + kind
        + payload
        + struct.pack(">I", zlib.crc32(kind + payload) & 0xFFFFFFFF)
    )


def stamp_png(digest_hex: str, size: int = _STAMP_SIZE) -> bytes:
    """A minimal valid grayscale PNG carrying ``digest_hex`` in a tEXt chunk.

    Same digest -> identical bytes, so stamped blobs are content-addressable
    and lineage is replayable from recorded digests alone.
    """
    ihdr = struct.pack(">IIBBBBB", size, size, 8, 0, 0, 0, 0)
    # Derive pixel rows from the digest so distinct digests differ in pixels too.
    seed = hashlib.sha256(digest_hex.encode("ascii")).digest()
    rows = b"".join(
        b"\x00" + bytes(seed[(y * size + x) % len(seed)] for x in range(size))
        for y in range(size)
    )
    return b"".join(
        [
            b"\x89PNG\r\n\x1a\n",
            _png_chunk(b"IHDR", ihdr),
            _png_chunk(b"tEXt", b"stamp\x00" + digest_hex.encode("ascii")),
            _png_chunk(b"IDAT", zlib.compress(rows, 9)),
            _png_chunk(b"IEND", b""),
        ]
    )


@dataclass(eq=False)
class MockScript:
    """Scripted replies plus call counters; shared with the test that built it.

    Queue entries may be exceptions (raised as one transport attempt) or
    reply strings. When the queue is empty, ``responder`` is consulted;
    with neither, chat raises ProtocolError.
    """

    chat_queue: deque = field(default_factory=deque)
    responder: Callable[[Sequence[ChatMessage]], str] | None = None
    chat_calls: int = 0
    chat_attempts: int = 0
    generate_calls: int = 0
    edit_calls: int = 0
    aesthetic_calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def push(self, *replies: "str | Exception") -> "MockScript":
        self.chat_queue.extend(replies)
        return self

    def pipeline_calls(self) -> int:
        return self.chat_calls + self.generate_calls + self.edit_calls


class MockBackend(Backend):
    def __init__(self, cfg: BackendConfig) -> None:
        super().__init__(cfg)
        if not isinstance(cfg.script, MockScript):
            raise ValueError("mock backend requires cfg.script to be a MockScript")
        self.script: MockScript = cfg.script

    def chat_complete(self, messages: Sequence[ChatMessage]) -> str:
        with self.script._lock:
            self.script.chat_calls += 1
        return super().chat_complete(messages)

    def _chat_once(self, messages: Sequence[ChatMessage]) -> str:
        with self.script._lock:
            self.script.chat_attempts += 1
            entry = self.script.chat_queue.popleft() if self.script.chat_queue else None
        if entry is None:
            if self.script.responder is not None:
                return self.script.responder(messages)
            raise ProtocolError("mock chat script exhausted")
        if isinstance(entry, Exception):
            raise entry
        return entry

    def _generate_once(self, prompt: str, seed: int | None) -> ImageBlob:
        with self.script._lock:
            self.script.generate_calls += 1
        material = prompt.encode("utf-8")
        if seed is not None:
            material += b"\x00seed:" + str(seed).encode("ascii")
        digest = hashlib.sha256(material).hexdigest()
        return ImageBlob.from_bytes(stamp_png(digest))

    def _edit_once(self, image: ImageBlob, instruction: str, seed: int | None) -> ImageBlob:
        with self.script._lock:
            self.script.edit_calls += 1
        material = image.sha256.encode("ascii") + b"\x00" + instruction.encode("utf-8")
        if seed is not None:
            material += b"\x00seed:" + str(seed).encode("ascii")
        digest = hashlib.sha256(material).hexdigest()
        return ImageBlob.from_bytes(stamp_png(digest))

    def _aesthetic_once(self, image: ImageBlob) -> float:
        with self.script._lock:
            self.script.aesthetic_calls += 1
        return stable_blob_score(image.sha256)


def mock_config(script: MockScript | None = None, **overrides) -> BackendConfig:
    """Convenience constructor for an all-defaults mock BackendConfig."""
    params = {"kind": "mock", "script": script or MockScript(), "backoff_base_ms": 1.0}
    params.update(overrides)
    return BackendConfig(**params)


def replay_edit_digest(input_digest: str, instruction: str, seed: int | None = None) -> str:
    """Digest the mock editor would produce for this input/instruction pair."""
    material = input_digest.encode("ascii") + b"\x00" + instruction.encode("utf-8")
    if seed is not None:
        material += b"\x00seed:" + str(seed).encode("ascii")
    return hashlib.sha256(stamp_png(hashlib.sha256(material).hexdigest())).hexdigest()
