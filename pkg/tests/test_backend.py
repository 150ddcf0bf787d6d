from __future__ import annotations

import json
import threading

import pytest
import requests

from langprog.backend import (
    CachingBackend,
    CompletionRequest,
    CompletionResponse,
    CredentialError,
    DiskCache,
    FinishReason,
    HttpBackend,
    MockBackend,
    MockRule,
    MockScript,
    ThrottleError,
    UnmatchedPromptError,
    cache_key,
    mock_match,
)


def req(user="What is 2+2?\nLet's think step by step", temperature=0.0, **kw):
    return CompletionRequest(model="gpt-3.5-turbo", user=user, temperature=temperature, **kw)


def test_request_invariants():
    with pytest.raises(ValueError):
        CompletionRequest(model="m", user="")
    with pytest.raises(ValueError):
        CompletionRequest(model="m", user="x", temperature=3.0)
    with pytest.raises(ValueError):
        CompletionRequest(model="m", user="x", max_tokens=0)


def test_cache_key_deterministic():
    assert cache_key(req(), "e") == cache_key(req(), "e")


def test_cache_key_sensitive_to_temperature():
    assert cache_key(req(temperature=0.0)) != cache_key(req(temperature=0.6))


def test_cache_key_sensitive_to_endpoint_and_text():
    assert cache_key(req(), "a") != cache_key(req(), "b")
    assert cache_key(req(user="x")) != cache_key(req(user="y"))


def test_cache_key_golden_value():
    # Frozen from an independent sha256-over-canonical-JSON computation.
    got = cache_key(req(), "https://api.openai.com/v1")
    assert got == "c6ccccf014ce1cd53a4b0ac10106bf610b9b26b2f0312e0d15bac3e17ad07297"


def test_mock_ordered_precedence():
    script = MockScript(
        [
            MockRule(match="step by step", response="first"),
            MockRule(match="step", response="second"),
        ]
    )
    assert mock_match(script, "Let's think step by step") == "first"


def test_mock_use_count_exhaustion_falls_through():
    script = MockScript(
        [
            MockRule(match="hello", response="limited", max_uses=1),
            MockRule(match="hello", response="fallback"),
        ]
    )
    assert mock_match(script, "hello there") == "limited"
    assert mock_match(script, "hello there") == "fallback"


def test_mock_unmatched_prompt_fails_loudly():
    script = MockScript([MockRule(match="alpha", response="x")])
    with pytest.raises(UnmatchedPromptError, match="no mock rule matches"):
        mock_match(script, "nothing relevant")


def test_mock_candidate_sequence_in_rule_order():
    # Simulates consuming one generation rule per candidate: 5 distinct texts.
    rules = [MockRule(match="revise", response=f"candidate {i}", max_uses=1) for i in range(5)]
    script = MockScript(rules)
    got = [mock_match(script, "please revise this") for _ in range(5)]
    assert got == [f"candidate {i}" for i in range(5)]


def test_mock_backend_substring_example():
    script = MockScript([MockRule(match="Let's think step by step", response="The answer is B")])
    backend = MockBackend(script)
    response = backend.complete(req())
    assert response.text == "The answer is B"
    assert response.finish_reason is FinishReason.STOP
    assert len(backend.calls) == 1


def test_mock_script_round_trips_through_file(tmp_path):
    path = tmp_path / "script.json"
    path.write_text(
        json.dumps(
            [
                {"match": "a", "response": "ra", "max_uses": 2},
                {"match": "^b$", "match_kind": "pattern", "response": "rb"},
            ]
        ),
        encoding="utf-8",
    )
    script = MockScript.from_file(path)
    assert mock_match(script, "xax") == "ra"
    assert mock_match(script, "b") == "rb"


def test_cache_second_call_is_hit(tmp_path):
    script = MockScript([MockRule(match="step", response="The answer is B")])
    backend = CachingBackend(MockBackend(script), DiskCache(tmp_path))
    first = backend.complete(req())
    second = backend.complete(req())
    assert not first.cached
    assert second.cached
    assert second.text == first.text


def test_cache_entries_are_reused_across_instances(tmp_path):
    script = MockScript([MockRule(match="step", response="cached text", max_uses=1)])
    backend = CachingBackend(MockBackend(script), DiskCache(tmp_path))
    backend.complete(req())
    # Fresh cache wrapper over an exhausted script: must still answer from disk.
    empty = CachingBackend(MockBackend(MockScript([])), DiskCache(tmp_path))
    got = empty.complete(req())
    assert got.cached and got.text == "cached text"


def test_cache_stats(tmp_path):
    cache = DiskCache(tmp_path)
    assert cache.stats() == (0, 0)
    cache.put("k1", req(), CompletionResponse(text="t"))
    count, size = cache.stats()
    assert count == 1 and size > 0


def test_cache_concurrent_readers_never_see_partial(tmp_path):
    cache = DiskCache(tmp_path)
    request = req()
    key = cache_key(request)
    errors: list[Exception] = []

    def writer():
        for _ in range(50):
            cache.put(key, request, CompletionResponse(text="x" * 2000))

    def reader():
        for _ in range(200):
            try:
                got = cache.get(key)
                if got is not None:
                    assert got.text == "x" * 2000
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

    threads = [threading.Thread(target=writer)] + [threading.Thread(target=reader) for _ in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []


class _FakeResponse:
    def __init__(self, status_code, body=None, text=""):
        self.status_code = status_code
        self._body = body or {}
        self.text = text

    def json(self):
        return self._body


def _ok_body(content="fine", finish="stop"):
    return {
        "choices": [{"message": {"content": content}, "finish_reason": finish}],
        "usage": {"prompt_tokens": 5, "completion_tokens": 3},
    }


def _http(monkeypatch, outcomes):
    backend = HttpBackend(model="m", api_key="k", base_url="http://test", backoff_base=0.0)
    calls = {"n": 0}

    def fake_post(payload):
        idx = min(calls["n"], len(outcomes) - 1)
        calls["n"] += 1
        outcome = outcomes[idx]
        if isinstance(outcome, Exception):
            raise outcome
        return outcome

    monkeypatch.setattr(backend, "_post", fake_post)
    return backend, calls


def test_http_backend_success(monkeypatch):
    backend, calls = _http(monkeypatch, [_FakeResponse(200, _ok_body())])
    response = backend.complete(req())
    assert response.text == "fine"
    assert response.usage == (5, 3)
    assert calls["n"] == 1


def test_http_backend_retries_transient_then_succeeds(monkeypatch):
    backend, calls = _http(
        monkeypatch,
        [
            requests.ConnectionError("boom"),
            _FakeResponse(500, text="oops"),
            _FakeResponse(200, _ok_body()),
        ],
    )
    assert backend.complete(req()).text == "fine"
    assert calls["n"] == 3


def test_http_backend_auth_failure(monkeypatch):
    backend, _ = _http(monkeypatch, [_FakeResponse(401, text="bad key")])
    with pytest.raises(CredentialError):
        backend.complete(req())


def test_http_backend_throttle_exhausted(monkeypatch):
    backend, calls = _http(monkeypatch, [_FakeResponse(429, text="slow down")])
    with pytest.raises(ThrottleError):
        backend.complete(req())
    assert calls["n"] == backend.max_retries + 1


def test_http_backend_missing_key():
    backend = HttpBackend(model="m", api_key="", base_url="http://test")
    backend.api_key = ""
    with pytest.raises(CredentialError):
        backend.complete(req())


def test_http_backend_surfaces_truncation(monkeypatch):
    backend, _ = _http(monkeypatch, [_FakeResponse(200, _ok_body(finish="length"))])
    assert backend.complete(req()).finish_reason is FinishReason.LENGTH
