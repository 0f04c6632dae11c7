from __future__ import annotations

import base64
import json
import random

import pytest
import requests

from showtable.backends import (
    AuthError,
    BackendConfig,
    ChatMessage,
    ContentRefused,
    HttpBackend,
    ImageBlob,
    MockScript,
    ProtocolError,
    TransportError,
    aesthetic_score,
    chat_complete,
    client_for,
    edit_image,
    generate_image,
    mock_config,
    stamp_png,
)


# -- mock behaviour -----------------------------------------------------------------


def test_mock_chat_scripted_echo():
    cfg = mock_config(MockScript().push("hello"))
    assert chat_complete(cfg, [ChatMessage.text("user", "hi")]) == "hello"


def test_mock_chat_exhausted_script_is_protocol_error():
    cfg = mock_config(MockScript())
    with pytest.raises(ProtocolError):
        chat_complete(cfg, [ChatMessage.text("user", "hi")])


def test_mock_retry_fail_twice_then_succeed():
    script = MockScript().push(TransportError("boom"), TransportError("boom"), "ok")
    cfg = mock_config(script, max_retries=3)
    assert chat_complete(cfg, [ChatMessage.text("user", "hi")]) == "ok"
    assert script.chat_attempts == 3
    assert script.chat_calls == 1


def test_mock_retries_exhausted():
    script = MockScript().push(*[TransportError("boom")] * 5)
    cfg = mock_config(script, max_retries=2)
    with pytest.raises(TransportError):
        chat_complete(cfg, [ChatMessage.text("user", "hi")])
    assert script.chat_attempts == 3  # 1 + max_retries


def test_mock_responder_used_after_queue():
    script = MockScript(responder=lambda msgs: "from responder")
    script.push("queued")
    cfg = mock_config(script)
    messages = [ChatMessage.text("user", "hi")]
    assert chat_complete(cfg, messages) == "queued"
    assert chat_complete(cfg, messages) == "from responder"


def test_mock_generate_deterministic():
    cfg = mock_config()
    assert generate_image(cfg, "prompt").sha256 == generate_image(cfg, "prompt").sha256


def test_mock_generate_no_collisions_over_1000_prompts():
    cfg = mock_config()
    rng = random.Random(3)
    digests = {generate_image(cfg, f"prompt-{rng.random()}-{i}").sha256 for i in range(1000)}
    assert len(digests) == 1000


def test_generate_rejects_empty_prompt():
    with pytest.raises(ValueError):
        generate_image(mock_config(), "")


def test_mock_edit_deterministic_and_order_sensitive():
    cfg = mock_config()
    image = generate_image(cfg, "base")
    ab = edit_image(cfg, edit_image(cfg, image, "a"), "b")
    ba = edit_image(cfg, edit_image(cfg, image, "b"), "a")
    assert ab.sha256 != ba.sha256
    assert edit_image(cfg, image, "a").sha256 == edit_image(cfg, image, "a").sha256


def test_mock_edit_seed_varies_output():
    cfg = mock_config()
    image = generate_image(cfg, "base")
    digests = {edit_image(cfg, image, "fix", seed=s).sha256 for s in range(5)}
    assert len(digests) == 5


def test_edit_rejects_empty_instruction():
    cfg = mock_config()
    with pytest.raises(ValueError):
        edit_image(cfg, generate_image(cfg, "p"), "")


def test_mock_aesthetic_deterministic_and_in_range():
    cfg = mock_config()
    blob = generate_image(cfg, "p")
    score = aesthetic_score(cfg, blob)
    assert 0.0 <= score <= 10.0
    assert score == aesthetic_score(cfg, blob)


def test_stamp_png_is_valid_png_with_dimensions():
    blob = ImageBlob.from_bytes(stamp_png("ab" * 32))
    assert blob.media_type == "image/png"
    assert blob.width == 8 and blob.height == 8


def test_chat_message_validation():
    with pytest.raises(ValueError):
        ChatMessage.text("robot", "hi")
    with pytest.raises(ValueError):
        ChatMessage(role="user", parts=())


def test_backend_config_validation():
    with pytest.raises(ValueError):
        BackendConfig(kind="http")  # endpoint/model required
    with pytest.raises(ValueError):
        BackendConfig(kind="mock")  # script required
    with pytest.raises(ValueError):
        BackendConfig(kind="carrier-pigeon")


# -- http wire protocol ----------------------------------------------------------------


class StubResponse:
    def __init__(self, status_code=200, body=None, headers=None, text=""):
        self.status_code = status_code
        self._body = body
        self.headers = headers or {}
        self.text = text

    def json(self):
        if self._body is None:
            raise ValueError("no json")
        return self._body


class StubSession:
    def __init__(self, responses):
        self.responses = list(responses)
        self.requests = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.requests.append({"url": url, "json": json, "headers": headers, "timeout": timeout})
        item = self.responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


def http_cfg(**overrides):
    params = dict(
        kind="http",
        endpoint="https://api.example.test/v1",
        model_name="test-model",
        api_key_env="TEST_API_KEY",
        backoff_base_ms=1.0,
        max_retries=2,
    )
    params.update(overrides)
    return BackendConfig(**params)


def chat_body(content="reply text"):
    return {"choices": [{"message": {"content": content}}]}


def test_http_missing_api_key_is_auth_error_before_any_call(monkeypatch):
    monkeypatch.delenv("TEST_API_KEY", raising=False)
    session = StubSession([StubResponse(body=chat_body())])
    backend = HttpBackend(http_cfg(), session=session)
    with pytest.raises(AuthError):
        backend.chat_complete([ChatMessage.text("user", "hi")])
    assert session.requests == []


def test_http_chat_round_trip(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "sk-test")
    session = StubSession([StubResponse(body=chat_body("hello"))])
    backend = HttpBackend(http_cfg(), session=session)
    blob = ImageBlob.from_bytes(stamp_png("cd" * 32))
    reply = backend.chat_complete([ChatMessage.with_images("user", "describe", [blob])])
    assert reply == "hello"
    request = session.requests[0]
    assert request["url"] == "https://api.example.test/v1/chat/completions"
    assert request["headers"]["Authorization"] == "Bearer sk-test"
    payload = request["json"]
    assert payload["model"] == "test-model"
    parts = payload["messages"][0]["content"]
    assert parts[0] == {"type": "text", "text": "describe"}
    assert parts[1]["image_url"]["url"].startswith("data:image/png;base64,")


def test_http_retries_on_5xx_then_succeeds(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "sk-test")
    session = StubSession([StubResponse(status_code=500), StubResponse(body=chat_body("ok"))])
    backend = HttpBackend(http_cfg(), session=session)
    assert backend.chat_complete([ChatMessage.text("user", "hi")]) == "ok"
    assert len(session.requests) == 2


def test_http_429_honors_retry_after(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "sk-test")
    session = StubSession(
        [StubResponse(status_code=429, headers={"Retry-After": "0"}), StubResponse(body=chat_body("ok"))]
    )
    backend = HttpBackend(http_cfg(), session=session)
    slept = []
    backend._backoff_delay = lambda attempt, retry_after: slept.append(retry_after) or 0.0
    assert backend.chat_complete([ChatMessage.text("user", "hi")]) == "ok"
    assert slept == [0.0]


def test_http_does_not_retry_plain_4xx(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "sk-test")
    session = StubSession([StubResponse(status_code=422, body={"error": {"code": "bad"}})])
    backend = HttpBackend(http_cfg(), session=session)
    with pytest.raises(ProtocolError):
        backend.chat_complete([ChatMessage.text("user", "hi")])
    assert len(session.requests) == 1


def test_http_401_is_auth_error(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "sk-test")
    session = StubSession([StubResponse(status_code=401)])
    backend = HttpBackend(http_cfg(), session=session)
    with pytest.raises(AuthError):
        backend.chat_complete([ChatMessage.text("user", "hi")])


def test_http_timeout_retried_then_transport_error(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "sk-test")
    session = StubSession([requests.Timeout("slow")] * 3)
    backend = HttpBackend(http_cfg(max_retries=2), session=session)
    with pytest.raises(TransportError):
        backend.chat_complete([ChatMessage.text("user", "hi")])
    assert len(session.requests) == 3


def test_http_generate_decodes_b64(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "sk-test")
    png = stamp_png("ef" * 32)
    body = {"data": [{"b64_json": base64.b64encode(png).decode("ascii")}]}
    session = StubSession([StubResponse(body=body)])
    backend = HttpBackend(http_cfg(), session=session)
    blob = backend.generate_image("a chart")
    assert blob.data == png
    request = session.requests[0]
    assert request["url"].endswith("/images/generations")
    assert request["json"]["response_format"] == "b64_json"


def test_http_edit_sends_data_url(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "sk-test")
    png = stamp_png("01" * 32)
    body = {"data": [{"b64_json": base64.b64encode(png).decode("ascii")}]}
    session = StubSession([StubResponse(body=body)])
    backend = HttpBackend(http_cfg(), session=session)
    source = ImageBlob.from_bytes(stamp_png("23" * 32))
    backend.edit_image(source, "make bars taller")
    request = session.requests[0]
    assert request["url"].endswith("/images/edits")
    assert request["json"]["prompt"] == "make bars taller"
    assert request["json"]["image"].startswith("data:image/png;base64,")


def test_http_content_refused(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "sk-test")
    body = {"error": {"code": "content_policy_violation"}}
    session = StubSession([StubResponse(status_code=400, body=body)])
    backend = HttpBackend(http_cfg(), session=session)
    with pytest.raises(ContentRefused):
        backend.generate_image("nope")


def test_http_malformed_chat_response(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "sk-test")
    session = StubSession([StubResponse(body={"choices": []})])
    backend = HttpBackend(http_cfg(), session=session)
    with pytest.raises(ProtocolError):
        backend.chat_complete([ChatMessage.text("user", "hi")])


def test_http_aesthetic_parses_and_clamps(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "sk-test")
    blob = ImageBlob.from_bytes(stamp_png("45" * 32))
    session = StubSession([StubResponse(body=chat_body("the score is 12.3"))])
    backend = HttpBackend(http_cfg(), session=session)
    assert backend.aesthetic_score(blob) == 10.0
    session = StubSession([StubResponse(body=chat_body("-3"))])
    backend = HttpBackend(http_cfg(), session=session)
    assert backend.aesthetic_score(blob) == 0.0
    session = StubSession([StubResponse(body=chat_body("7.5"))])
    backend = HttpBackend(http_cfg(), session=session)
    assert backend.aesthetic_score(blob) == 7.5


def test_http_aesthetic_without_number_is_protocol_error(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "sk-test")
    blob = ImageBlob.from_bytes(stamp_png("67" * 32))
    session = StubSession([StubResponse(body=chat_body("lovely image"))] * 3)
    backend = HttpBackend(http_cfg(max_retries=0), session=session)
    with pytest.raises(ProtocolError):
        backend.aesthetic_score(blob)


def test_client_cache_returns_same_client():
    cfg = mock_config()
    assert client_for(cfg) is client_for(cfg)


def test_blob_immutability():
    blob = ImageBlob.from_bytes(b"\x89PNG\r\n\x1a\nrest")
    with pytest.raises(AttributeError):
        blob.data = b"other"
