"""Shared backend types: messages, blobs, configuration, errors, retry policy.

One backend instance serves one pipeline role (rewrite, generate, reflect,
refine, judge, aesthetic); roles are configured independently so models can
be mixed per role.
"""

from __future__ import annotations

import hashlib
import logging
import random
import struct
import threading
import time
from dataclasses import dataclass
from typing import Sequence

logger = logging.getLogger(__name__)

ROLES = ("rewrite", "generate", "reflect", "refine", "judge", "aesthetic")


class BackendError(Exception):
    pass


class TransportError(BackendError):
    """Transient transport failure (timeout, connection error, 5xx, 429)."""

    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class AuthError(BackendError):
    """Missing or rejected API key."""


class ProtocolError(BackendError):
    """Response violates the wire schema."""


class ContentRefused(BackendError):
    """Backend declined to generate or edit the image."""


@dataclass(frozen=True)
class ImageBlob:
    data: bytes
    media_type: str
    sha256: str
    width: int | None = None
    height: int | None = None

    @classmethod
    def from_bytes(cls, data: bytes, media_type: str = "image/png") -> "ImageBlob":
        width, height = _png_dimensions(data)
        return cls(
            data=data,
            media_type=media_type,
            sha256=hashlib.sha256(data).hexdigest(),
            width=width,
            height=height,
        )


def _png_dimensions(data: bytes) -> tuple[int | None, int | None]:
    # PNG signature + IHDR is all we decode; other formats keep None.
    if len(data) >= 24 and data[:8] == b"\x89PNG\r\n\x1a\n" and data[12:16] == b"IHDR":
        width, height = struct.unpack(">II", data[16:24])
        return width, height
    return None, None


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    blob: ImageBlob


@dataclass(frozen=True)
class ChatMessage:
    role: str  # system | user | assistant
    parts: tuple[TextPart | ImagePart, ...]

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"invalid role: {self.role}")
        if not self.parts:
            raise ValueError("message parts must be non-empty")

    @classmethod
    def text(cls, role: str, text: str) -> "ChatMessage":
        return cls(role=role, parts=(TextPart(text),))

    @classmethod
    def with_images(cls, role: str, text: str, blobs: Sequence[ImageBlob]) -> "ChatMessage":
        parts: tuple[TextPart | ImagePart, ...] = (TextPart(text),) + tuple(ImagePart(b) for b in blobs)
        return cls(role=role, parts=parts)

    def joined_text(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))

    def image_blobs(self) -> list[ImageBlob]:
        return [p.blob for p in self.parts if isinstance(p, ImagePart)]


@dataclass(frozen=True, eq=False)
class BackendConfig:
    """Configuration for one backend role. ``kind`` selects the client:
    "http" talks the chat/image wire protocols, "mock" replays a script."""

    kind: str
    endpoint: str = ""
    model_name: str = ""
    api_key_env: str = ""
    timeout_s: float = 120.0
    max_retries: int = 2
    backoff_base_ms: float = 250.0
    max_inflight: int = 4
    script: "object | None" = None  # MockScript for kind == "mock"

    def __post_init__(self) -> None:
        if self.kind not in ("http", "mock"):
            raise ValueError(f"unknown backend kind: {self.kind}")
        if self.kind == "http" and (not self.endpoint or not self.model_name):
            raise ValueError("http backend requires endpoint and model_name")
        if self.kind == "mock" and self.script is None:
            raise ValueError("mock backend requires a script")
        if self.timeout_s <= 0 or self.backoff_base_ms <= 0:
            raise ValueError("timeout_s and backoff_base_ms must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")

    def fingerprint_fields(self) -> dict:
        return {"kind": self.kind, "endpoint": self.endpoint, "model_name": self.model_name}


class Backend:
    """Base client: retry loop with exponential backoff + jitter, and a
    per-endpoint in-flight cap shared by all operations of this client."""

    def __init__(self, cfg: BackendConfig) -> None:
        self.cfg = cfg
        self._gate = threading.BoundedSemaphore(max(1, cfg.max_inflight))

    # Subclasses implement the single-attempt transports.
    def _chat_once(self, messages: Sequence[ChatMessage]) -> str:
        raise NotImplementedError

    def _generate_once(self, prompt: str, seed: int | None) -> ImageBlob:
        raise NotImplementedError

    def _edit_once(self, image: ImageBlob, instruction: str, seed: int | None) -> ImageBlob:
        raise NotImplementedError

    def _aesthetic_once(self, image: ImageBlob) -> float:
        raise NotImplementedError

    def chat_complete(self, messages: Sequence[ChatMessage]) -> str:
        for msg in messages:
            if not isinstance(msg, ChatMessage):
                raise ValueError("messages must be ChatMessage instances")
        return self._with_retries(lambda: self._chat_once(messages))

    def generate_image(self, prompt: str, seed: int | None = None) -> ImageBlob:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        return self._with_retries(lambda: self._generate_once(prompt, seed))

    def edit_image(self, image: ImageBlob, instruction: str, seed: int | None = None) -> ImageBlob:
        if not instruction:
            raise ValueError("instruction must be non-empty")
        return self._with_retries(lambda: self._edit_once(image, instruction, seed))

    def aesthetic_score(self, image: ImageBlob) -> float:
        value = self._with_retries(lambda: self._aesthetic_once(image))
        return min(10.0, max(0.0, value))

    def _with_retries(self, attempt_fn):
        last: TransportError | None = None
        for attempt in range(self.cfg.max_retries + 1):
            try:
                with self._gate:
                    return attempt_fn()
            except TransportError as exc:
                last = exc
                if attempt == self.cfg.max_retries:
                    break
                delay = self._backoff_delay(attempt, exc.retry_after)
                logger.debug("transient backend failure (%s); retrying in %.3fs", exc, delay)
                time.sleep(delay)
        raise TransportError(f"retries exhausted after {self.cfg.max_retries + 1} attempts: {last}")

    def _backoff_delay(self, attempt: int, retry_after: float | None) -> float:
        if retry_after is not None:
            return min(retry_after, 60.0)
        base = self.cfg.backoff_base_ms / 1000.0 * (2 ** attempt)
        return min(base * (1.0 + random.random() * 0.25), 30.0)


def stable_blob_score(digest_hex: str) -> float:
    """Hash a digest to a deterministic scalar uniform over [0, 10]."""
    h = hashlib.sha256(digest_hex.encode("ascii")).digest()
    return int.from_bytes(h[:8], "big") / float(2**64) * 10.0
