"""HTTP clients for chat-completions-style endpoints.

Wire formats:
    POST {endpoint}/chat/completions   {"model", "messages": [{role, content parts}]}
    POST {endpoint}/images/generations {"model", "prompt", "response_format": "b64_json"}
    POST {endpoint}/images/edits       {"model", "prompt", "image": data URL, ...}

API keys are only ever read from the environment variable named in the
config; they are never logged or persisted. Aesthetic scoring rides on the
chat protocol: the image is sent with a fixed scoring instruction and the
first number in the reply is clamped to [0, 10].
"""

from __future__ import annotations

import base64
import json
import os
import re

import requests

from .base import (
    AuthError,
    Backend,
    BackendConfig,
    ChatMessage,
    ContentRefused,
    ImageBlob,
    ImagePart,
    ProtocolError,
    TextPart,
    TransportError,
)

_FLOAT_RE = re.compile(r"-?\d+(?:\.\d+)?")
_REFUSAL_CODES = {"content_policy_violation", "moderation_blocked", "content_filter"}

AESTHETIC_INSTRUCTION = (
    "Rate the overall visual appeal of the attached image on a 0-10 scale, "
    "considering layout, color palette, and typography. Reply with the number only."
)


def _data_url(blob: ImageBlob) -> str:
    return f"data:{blob.media_type};base64," + base64.b64encode(blob.data).decode("ascii")


def _encode_messages(messages) -> list[dict]:
    encoded = []
    for msg in messages:
        content = []
        for part in msg.parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            elif isinstance(part, ImagePart):
                content.append({"type": "image_url", "image_url": {"url": _data_url(part.blob)}})
        encoded.append({"role": msg.role, "content": content})
    return encoded


class HttpBackend(Backend):
    def __init__(self, cfg: BackendConfig, session: requests.Session | None = None) -> None:
        super().__init__(cfg)
        self.session = session or requests.Session()

    def _api_key(self) -> str:
        key = os.environ.get(self.cfg.api_key_env, "") if self.cfg.api_key_env else ""
        if not key:
            raise AuthError(f"API key not found in environment variable {self.cfg.api_key_env!r}")
        return key

    def _post(self, path: str, payload: dict) -> dict:
        url = self.cfg.endpoint.rstrip("/") + path
        headers = {
            "Authorization": f"Bearer {self._api_key()}",
            "Content-Type": "application/json",
        }
        try:
            response = self.session.post(url, json=payload, headers=headers, timeout=self.cfg.timeout_s)
        except requests.Timeout as exc:
            raise TransportError(f"timeout after {self.cfg.timeout_s}s") from exc
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc

        status = response.status_code
        if status == 429:
            raise TransportError("rate limited (429)", retry_after=_retry_after(response))
        if status >= 500:
            raise TransportError(f"server error ({status})")
        if status in (401, 403):
            raise AuthError(f"API key rejected ({status})")
        body = _json_body(response)
        if status >= 400:
            code = str(((body or {}).get("error") or {}).get("code", ""))
            if code in _REFUSAL_CODES:
                raise ContentRefused(code)
            raise ProtocolError(f"client error ({status})")
        if body is None:
            raise ProtocolError("response body is not JSON")
        return body

    def _chat_once(self, messages) -> str:
        body = self._post(
            "/chat/completions",
            {"model": self.cfg.model_name, "messages": _encode_messages(messages)},
        )
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed chat response: {exc}") from exc
        if not isinstance(content, str):
            raise ProtocolError("chat content is not a string")
        return content

    def _generate_once(self, prompt: str, seed: int | None) -> ImageBlob:
        payload = {"model": self.cfg.model_name, "prompt": prompt, "response_format": "b64_json"}
        if seed is not None:
            payload["seed"] = seed
        return self._decode_image(self._post("/images/generations", payload))

    def _edit_once(self, image: ImageBlob, instruction: str, seed: int | None) -> ImageBlob:
        payload = {
            "model": self.cfg.model_name,
            "prompt": instruction,
            "image": _data_url(image),
            "response_format": "b64_json",
        }
        if seed is not None:
            payload["seed"] = seed
        return self._decode_image(self._post("/images/edits", payload))

    def _aesthetic_once(self, image: ImageBlob) -> float:
        reply = self._chat_once([ChatMessage.with_images("user", AESTHETIC_INSTRUCTION, [image])])
        match = _FLOAT_RE.search(reply)
        if match is None:
            raise ProtocolError(f"no numeric score in reply: {reply[:80]!r}")
        return float(match.group(0))

    def _decode_image(self, body: dict) -> ImageBlob:
        try:
            b64 = body["data"][0]["b64_json"]
            data = base64.b64decode(b64)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed image response: {exc}") from exc
        return ImageBlob.from_bytes(data)


def _retry_after(response) -> float | None:
    value = response.headers.get("Retry-After")
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None


def _json_body(response) -> dict | None:
    try:
        body = response.json()
    except (ValueError, json.JSONDecodeError):
        return None
    return body if isinstance(body, dict) else None
