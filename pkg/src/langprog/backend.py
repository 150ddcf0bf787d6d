"""Chat-completion backends: live HTTP, scripted mock, and a disk cache.

All implementations expose a single ``complete`` call. The live backend
speaks the OpenAI-compatible chat-completions protocol so one client can
serve hosted models and local inference servers alike. The mock backend
replays an ordered rule script and never touches the network.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable

import requests

API_KEY_ENV = "LP_API_KEY"
BASE_URL_ENV = "LP_BASE_URL"
DEFAULT_BASE_URL = "https://api.openai.com/v1"

DEFAULT_MAX_TOKENS = 1024
COMPRESS_MAX_TOKENS = 2048


class BackendError(Exception):
    """Base class for completion failures."""


class CredentialError(BackendError):
    pass


class ThrottleError(BackendError):
    pass


class UnmatchedPromptError(BackendError):
    """No mock rule matched; carries the offending prompt so tests fail loudly."""

    def __init__(self, prompt: str):
        super().__init__(f"no mock rule matches prompt:\n{prompt}")
        self.prompt = prompt


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"


@dataclass(frozen=True)
class CompletionRequest:
    model: str
    user: str
    temperature: float = 0.0
    max_tokens: int = DEFAULT_MAX_TOKENS
    system: str | None = None
    seed_hint: int | None = None

    def __post_init__(self) -> None:
        if not self.user:
            raise ValueError("request user text must be nonempty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    finish_reason: FinishReason = FinishReason.STOP
    usage: tuple[int, int] = (0, 0)
    cached: bool = False


def cache_key(request: CompletionRequest, endpoint: str = "") -> str:
    """Stable content digest of one request, identical across processes."""
    payload = json.dumps(
        [
            endpoint,
            request.model,
            request.system,
            request.user,
            request.temperature,
            request.max_tokens,
        ],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ChatBackend:
    """Interface: one uniform completion call plus an endpoint identity."""

    endpoint: str = ""
    model: str = ""

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        raise NotImplementedError


@dataclass
class MockRule:
    match: str
    response: str
    match_kind: str = "substring"
    max_uses: int | None = None
    uses: int = 0

    def __post_init__(self) -> None:
        if self.match_kind not in ("substring", "pattern"):
            raise ValueError(f"unknown match_kind {self.match_kind!r}")
        if self.match_kind == "pattern":
            self._compiled = re.compile(self.match)

    def exhausted(self) -> bool:
        return self.max_uses is not None and self.uses >= self.max_uses

    def hits(self, prompt: str) -> bool:
        if self.match_kind == "substring":
            return self.match in prompt
        return self._compiled.search(prompt) is not None


class MockScript:
    """Ordered rule list; the first live matching rule answers each prompt."""

    def __init__(self, rules: list[MockRule]):
        self.rules = rules
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "MockScript":
        records = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = [
            MockRule(
                match=r["match"],
                response=r["response"],
                match_kind=r.get("match_kind", "substring"),
                max_uses=r.get("max_uses"),
            )
            for r in records
        ]
        return cls(rules)

    def match(self, prompt: str) -> str:
        with self._lock:
            for rule in self.rules:
                if rule.exhausted():
                    continue
                if rule.hits(prompt):
                    rule.uses += 1
                    return rule.response
        raise UnmatchedPromptError(prompt)


def mock_match(script: MockScript, prompt: str) -> str:
    """First unexhausted matching rule fires and its use count is consumed."""
    return script.match(prompt)


class MockBackend(ChatBackend):
    """Deterministic scripted stand-in for the chat model. No network I/O."""

    def __init__(self, script: MockScript, model: str = "mock-model"):
        self.script = script
        self.model = model
        self.endpoint = "mock:"
        self.calls: list[CompletionRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        text = self.script.match(request.user)
        with self._lock:
            self.calls.append(request)
        usage = (len(request.user.split()), len(text.split()))
        return CompletionResponse(text=text, finish_reason=FinishReason.STOP, usage=usage)


@dataclass
class HttpBackend(ChatBackend):
    """OpenAI-compatible chat-completions client with retry and backoff."""

    model: str
    base_url: str = ""
    api_key: str = ""
    timeout: float = 120.0
    max_retries: int = 3
    backoff_base: float = 0.5
    _sleep: Callable[[float], None] = field(default=time.sleep, repr=False)
    _local: threading.local = field(default_factory=threading.local, repr=False)

    def __post_init__(self) -> None:
        self.base_url = (self.base_url or os.environ.get(BASE_URL_ENV, DEFAULT_BASE_URL)).rstrip("/")
        self.api_key = self.api_key or os.environ.get(API_KEY_ENV, "")
        self.endpoint = self.base_url

    def _session(self) -> requests.Session:
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def _post(self, payload: dict[str, Any]) -> requests.Response:
        return self._session().post(
            f"{self.base_url}/chat/completions",
            json=payload,
            headers={"Authorization": f"Bearer {self.api_key}"},
            timeout=self.timeout,
        )

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        if not self.api_key:
            raise CredentialError(f"no API key; set {API_KEY_ENV}")
        messages = []
        if request.system:
            messages.append({"role": "system", "content": request.system})
        messages.append({"role": "user", "content": request.user})
        payload = {
            "model": request.model or self.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }

        last_error: Exception | None = None
        throttled = False
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(self.backoff_base * 2 ** (attempt - 1))
            try:
                resp = self._post(payload)
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code in (401, 403):
                raise CredentialError(f"authentication failed ({resp.status_code}): {resp.text}")
            if resp.status_code == 429:
                throttled = True
                last_error = BackendError(f"rate limited: {resp.text}")
                continue
            if resp.status_code >= 500:
                last_error = BackendError(f"server error {resp.status_code}: {resp.text}")
                continue
            if resp.status_code != 200:
                raise BackendError(f"unexpected status {resp.status_code}: {resp.text}")
            return self._parse(resp.json())

        if throttled:
            raise ThrottleError(f"rate limit persisted after {self.max_retries} retries") from last_error
        raise BackendError(f"request failed after {self.max_retries} retries: {last_error}") from last_error

    @staticmethod
    def _parse(body: dict[str, Any]) -> CompletionResponse:
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"] or ""
            reason = choice.get("finish_reason", "stop")
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion response: {body}") from exc
        usage = body.get("usage", {})
        return CompletionResponse(
            text=text,
            finish_reason=FinishReason.LENGTH if reason == "length" else FinishReason.STOP,
            usage=(usage.get("prompt_tokens", 0), usage.get("completion_tokens", 0)),
        )


class DiskCache:
    """One JSON file per request digest; entries are immutable once written."""

    def __init__(self, cache_dir: str | Path):
        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.dir / f"{key}.json"

    def get(self, key: str) -> CompletionResponse | None:
        path = self._path(key)
        if not path.exists():
            return None
        record = json.loads(path.read_text(encoding="utf-8"))
        resp = record["response"]
        return CompletionResponse(
            text=resp["text"],
            finish_reason=FinishReason(resp["finish_reason"]),
            usage=tuple(resp["usage"]),
            cached=True,
        )

    def put(self, key: str, request: CompletionRequest, response: CompletionResponse) -> None:
        record = {
            "request": {
                "model": request.model,
                "system": request.system,
                "user": request.user,
                "temperature": request.temperature,
                "max_tokens": request.max_tokens,
            },
            "response": {
                "text": response.text,
                "finish_reason": response.finish_reason.value,
                "usage": list(response.usage),
            },
        }
        path = self._path(key)
        # Concurrent readers must never see a partial entry.
        tmp = path.with_name(path.name + f".tmp{os.getpid()}.{threading.get_ident()}")
        tmp.write_text(json.dumps(record, ensure_ascii=False, indent=2), encoding="utf-8")
        os.replace(tmp, path)

    def stats(self) -> tuple[int, int]:
        """(entry count, total bytes) across the cache directory."""
        entries = list(self.dir.glob("*.json"))
        return len(entries), sum(p.stat().st_size for p in entries)


class CachingBackend(ChatBackend):
    """Wrap any backend with a persistent response cache."""

    def __init__(self, inner: ChatBackend, cache: DiskCache):
        self.inner = inner
        self.cache = cache
        self.endpoint = inner.endpoint
        self.model = inner.model

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        key = cache_key(request, self.inner.endpoint)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        response = self.inner.complete(request)
        self.cache.put(key, request, response)
        return response
