"""Uniform client layer over the four model capabilities the pipeline needs:
chat (text+image), text-to-image generation, instruction-guided editing, and
aesthetic scoring. Real HTTP clients and fully deterministic mocks share one
interface and one retry policy."""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

from .base import (
    ROLES,
    AuthError,
    Backend,
    BackendConfig,
    BackendError,
    ChatMessage,
    ContentRefused,
    ImageBlob,
    ImagePart,
    ProtocolError,
    TextPart,
    TransportError,
    stable_blob_score,
)
from .http import HttpBackend
from .mock import MockBackend, MockScript, mock_config, replay_edit_digest, stamp_png

__all__ = [
    "ROLES",
    "AuthError",
    "Backend",
    "BackendConfig",
    "BackendError",
    "ChatMessage",
    "ContentRefused",
    "HttpBackend",
    "ImageBlob",
    "ImagePart",
    "MockBackend",
    "MockScript",
    "ProtocolError",
    "TextPart",
    "TransportError",
    "aesthetic_score",
    "chat_complete",
    "client_for",
    "edit_image",
    "generate_image",
    "mock_config",
    "replay_edit_digest",
    "stable_blob_score",
    "stamp_png",
]


@lru_cache(maxsize=None)
def client_for(cfg: BackendConfig) -> Backend:
    """One client per config instance; clients are immutable and shareable."""
    if cfg.kind == "mock":
        return MockBackend(cfg)
    return HttpBackend(cfg)


def chat_complete(cfg: BackendConfig, messages: Sequence[ChatMessage]) -> str:
    return client_for(cfg).chat_complete(messages)


def generate_image(cfg: BackendConfig, prompt: str, seed: int | None = None) -> ImageBlob:
    return client_for(cfg).generate_image(prompt, seed)


def edit_image(cfg: BackendConfig, image: ImageBlob, instruction: str, seed: int | None = None) -> ImageBlob:
    return client_for(cfg).edit_image(image, instruction, seed)


def aesthetic_score(cfg: BackendConfig, image: ImageBlob) -> float:
    return client_for(cfg).aesthetic_score(image)
