"""Chat-completion backends: an OpenAI-compatible HTTP client and a scripted mock.

Both expose a single ``complete(request)`` call so every pipeline stage is
backend-agnostic. The remote client retries transient failures with
exponential backoff, enforces a token-bucket rate limit, and caps in-flight
requests; the mock replays a fixed script and is the determinism anchor for
the whole test suite.
"""

from __future__ import annotations

import base64
import json
import logging
import mimetypes
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol

import httpx

from .config import ClientConfig
from .core import ImageRef

log = logging.getLogger(__name__)

ENV_API_BASE = "HVCU_API_BASE"
ENV_API_KEY = "HVCU_API_KEY"
ENV_MODEL = "HVCU_MODEL"

RETRYABLE_STATUS = frozenset({408, 429}) | frozenset(range(500, 600))


class ClientError(Exception):
    pass


class AuthError(ClientError):
    """Credentials rejected or missing; never retried."""


class TransportError(ClientError):
    """Network failure or retryable HTTP status after exhausting retries."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class ContractError(ClientError):
    """Response arrived but lacks assistant content (or non-retryable 4xx)."""


class ScriptExhausted(ClientError):
    """The mock script has fewer entries than calls made."""


class MatchError(ClientError):
    """A mock entry's matcher did not occur in the rendered prompt."""


@dataclass(frozen=True)
class ChatMessage:
    role: str  # system | user | assistant
    text: str
    images: tuple[ImageRef, ...] = ()

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.images and self.role != "user":
            raise ValueError("images are only permitted on user messages")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_output_tokens: Optional[int] = None
    tag: str = ""

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def rendered(self) -> str:
        """All message texts joined; what mock matchers are tested against."""
        return "\n".join(m.text for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    latency_ms: int = 0
    attempt_count: int = 1


def user_message(text: str, image: ImageRef | None = None) -> ChatMessage:
    return ChatMessage(role="user", text=text, images=(image,) if image else ())


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


class TokenBucket:
    """Blocking requests-per-minute limiter; thread-safe."""

    def __init__(self, rate_per_minute: float, clock=time.monotonic, sleep=time.sleep):
        self.capacity = rate_per_minute
        self.tokens = rate_per_minute
        self.refill_per_s = rate_per_minute / 60.0
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self.tokens = min(self.capacity, self.tokens + (now - self._last) * self.refill_per_s)
                self._last = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.refill_per_s
            self._sleep(wait)


class _InFlightGauge:
    """Counter with a high-water mark, observable in tests."""

    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.high_water = 0

    def __enter__(self):
        with self._lock:
            self.current += 1
            self.high_water = max(self.high_water, self.current)
        return self

    def __exit__(self, *exc):
        with self._lock:
            self.current -= 1
        return False


def _image_url(ref: ImageRef) -> str:
    uri = ref.path_or_uri
    if uri.startswith(("http://", "https://", "data:")):
        return uri
    data = Path(uri).read_bytes()
    media = ref.media_type or mimetypes.guess_type(uri)[0] or "image/png"
    return f"data:{media};base64,{base64.b64encode(data).decode('ascii')}"


def _message_payload(msg: ChatMessage) -> dict:
    if not msg.images:
        return {"role": msg.role, "content": msg.text}
    parts: list[dict] = [{"type": "text", "text": msg.text}]
    parts += [{"type": "image_url", "image_url": {"url": _image_url(i)}} for i in msg.images]
    return {"role": msg.role, "content": parts}


class RemoteClient:
    """OpenAI-compatible chat-completions client.

    Retries only transport failures and HTTP 408/429/5xx, with
    non-decreasing exponential backoff; 401/403 raise AuthError and
    other 4xx raise ContractError immediately so prompt bugs surface.
    Safe to share across threads.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str,
        model: str,
        config: ClientConfig | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.config = config or ClientConfig()
        self._sleep = sleep
        self._http = httpx.Client(
            timeout=self.config.timeout_s,
            transport=transport,
            headers={"Authorization": f"Bearer {api_key}"},
        )
        self._bucket = (
            TokenBucket(self.config.requests_per_minute, sleep=sleep)
            if self.config.requests_per_minute
            else None
        )
        self._gauge = _InFlightGauge()
        self._slots = threading.BoundedSemaphore(self.config.max_in_flight)

    @classmethod
    def from_env(cls, config: ClientConfig | None = None) -> "RemoteClient":
        base = os.environ.get(ENV_API_BASE, "")
        key = os.environ.get(ENV_API_KEY, "")
        model = os.environ.get(ENV_MODEL, "")
        if not base or not key or not model:
            missing = [
                name
                for name, val in ((ENV_API_BASE, base), (ENV_API_KEY, key), (ENV_MODEL, model))
                if not val
            ]
            raise AuthError(f"missing environment configuration: {', '.join(missing)}")
        return cls(base, key, model, config=config)

    @property
    def in_flight(self) -> int:
        return self._gauge.current

    @property
    def max_in_flight_seen(self) -> int:
        return self._gauge.high_water

    def _backoff(self, attempt: int) -> float:
        return self.config.backoff_base_s * (2 ** (attempt - 1))

    def complete(self, request: ChatRequest) -> ChatResponse:
        if request.temperature > self.config.temperature_cap:
            raise ValueError(
                f"temperature {request.temperature} exceeds cap {self.config.temperature_cap}"
            )
        body = {
            "model": self.model,
            "messages": [_message_payload(m) for m in request.messages],
            "temperature": request.temperature,
        }
        if request.max_output_tokens is not None:
            body["max_tokens"] = request.max_output_tokens

        url = f"{self.base_url}/chat/completions"
        started = time.monotonic()
        last_failure = ""
        with self._slots, self._gauge:
            for attempt in range(1, self.config.max_attempts + 1):
                if attempt > 1:
                    self._sleep(self._backoff(attempt - 1))
                if self._bucket:
                    self._bucket.acquire()
                try:
                    resp = self._http.post(url, json=body)
                except httpx.TransportError as exc:
                    last_failure = f"transport: {exc}"
                    log.warning("[%s] attempt %d failed: %s", request.tag, attempt, last_failure)
                    continue
                if resp.status_code in (401, 403):
                    raise AuthError(f"backend rejected credentials ({resp.status_code})")
                if resp.status_code in RETRYABLE_STATUS:
                    last_failure = f"HTTP {resp.status_code}"
                    log.warning("[%s] attempt %d failed: %s", request.tag, attempt, last_failure)
                    continue
                if resp.status_code >= 400:
                    raise ContractError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                try:
                    content = resp.json()["choices"][0]["message"]["content"]
                except (KeyError, IndexError, TypeError, json.JSONDecodeError) as exc:
                    raise ContractError(f"response body lacks assistant content: {exc}") from exc
                if not isinstance(content, str):
                    raise ContractError("assistant content is not text")
                latency = int((time.monotonic() - started) * 1000)
                return ChatResponse(text=content, latency_ms=latency, attempt_count=attempt)
        raise TransportError(
            f"retries exhausted after {self.config.max_attempts} attempts ({last_failure})",
            attempts=self.config.max_attempts,
        )


@dataclass
class ScriptEntry:
    match: str
    response: str


class MockClient:
    """Deterministic scripted backend.

    Entries are consumed strictly in order; each entry's ``match`` string
    must occur in the rendered prompt of the call that consumes it,
    otherwise MatchError identifies the mismatched entry. Consumption is
    serialized, so a fixed script yields byte-reproducible runs.
    """

    def __init__(self, script: list[ScriptEntry] | list[tuple[str, str]] | None = None):
        self._script: list[ScriptEntry] = []
        self._cursor = 0
        self._lock = threading.Lock()
        self.requests: list[ChatRequest] = []
        if script:
            self.enqueue(script)

    def enqueue(self, script: list[ScriptEntry] | list[tuple[str, str]]) -> int:
        """Append entries; returns the index of the first one added."""
        with self._lock:
            handle = len(self._script)
            for entry in script:
                if isinstance(entry, ScriptEntry):
                    self._script.append(entry)
                else:
                    self._script.append(ScriptEntry(match=entry[0], response=entry[1]))
            return handle

    @property
    def remaining(self) -> int:
        with self._lock:
            return len(self._script) - self._cursor

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            if self._cursor >= len(self._script):
                raise ScriptExhausted(
                    f"mock script exhausted after {len(self._script)} entries (tag={request.tag!r})"
                )
            entry = self._script[self._cursor]
            if entry.match and entry.match not in request.rendered():
                raise MatchError(
                    f"entry {self._cursor} expected substring {entry.match!r} "
                    f"absent from prompt (tag={request.tag!r})"
                )
            self._cursor += 1
            self.requests.append(request)
            return ChatResponse(text=entry.response, latency_ms=0, attempt_count=1)


def load_mock_script(path: str | Path) -> list[ScriptEntry]:
    """Read a script file: a JSON array of {match, response} objects."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise ValueError(f"{path}: mock script must be a JSON array")
    entries = []
    for i, row in enumerate(data):
        if not isinstance(row, dict) or "response" not in row:
            raise ValueError(f"{path}: entry {i} must be an object with a 'response' field")
        entries.append(ScriptEntry(match=str(row.get("match", "")), response=str(row["response"])))
    return entries
