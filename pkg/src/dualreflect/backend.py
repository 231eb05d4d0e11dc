"""Chat-completion backends.

``HttpBackend`` speaks the OpenAI-compatible ``/chat/completions`` wire format.
``ScriptedBackend`` answers from a rule list and is fully deterministic, which
makes whole pipeline runs reproducible in tests.
"""

from __future__ import annotations

import enum
import json
import logging
import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol

import httpx

from .errors import (
    BadRequest,
    MalformedResponse,
    RateLimited,
    ScriptError,
    ScriptExhausted,
    TransportError,
)
from .prompts import MessageSequence, messages_to_dicts, prompt_text

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: MessageSequence
    temperature: float = 0.0
    max_output_tokens: int | None = None
    stop: tuple[str, ...] | None = None
    stage: str | None = None  # informational; used by StageLabel script rules

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.max_output_tokens is not None and self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )


@dataclass(frozen=True)
class ChatResponse:
    content: str
    usage: Usage = field(default_factory=Usage)
    latency: float = 0.0
    attempts: int = 1


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


class HttpBackend:
    """Client for any OpenAI-compatible chat-completions server.

    Retries 429, 5xx, timeouts and connection errors with exponential backoff
    and full jitter. Other 4xx responses fail immediately. Safe to share
    between threads; ``max_concurrency`` caps in-flight requests.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        *,
        timeout: float = 60.0,
        max_attempts: int = 5,
        initial_backoff: float = 1.0,
        backoff_multiplier: float = 2.0,
        max_backoff: float = 60.0,
        max_concurrency: int | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ) -> None:
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.base_url = base_url.rstrip("/")
        self.max_attempts = max_attempts
        self.initial_backoff = initial_backoff
        self.backoff_multiplier = backoff_multiplier
        self.max_backoff = max_backoff
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._rng_lock = threading.Lock()
        self._limiter = threading.BoundedSemaphore(max_concurrency) if max_concurrency else None
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(headers=headers, timeout=timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "HttpBackend":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def backoff_delay(self, retry: int) -> float:
        """Delay before retry number ``retry`` (1-based): uniform in [0, cap]."""
        cap = min(self.max_backoff, self.initial_backoff * self.backoff_multiplier ** (retry - 1))
        with self._rng_lock:
            return self._rng.uniform(0.0, cap)

    def _body(self, request: ChatRequest) -> dict:
        body = {
            "model": request.model,
            "messages": messages_to_dicts(request.messages),
            "temperature": request.temperature,
        }
        if request.max_output_tokens is not None:
            body["max_tokens"] = request.max_output_tokens
        if request.stop:
            body["stop"] = list(request.stop)
        return body

    def complete(self, request: ChatRequest) -> ChatResponse:
        url = f"{self.base_url}/chat/completions"
        body = self._body(request)
        logger.debug("POST %s body=%s", url, json.dumps(body, ensure_ascii=False))
        if self._limiter:
            self._limiter.acquire()
        try:
            return self._complete_with_retries(url, body)
        finally:
            if self._limiter:
                self._limiter.release()

    def _complete_with_retries(self, url: str, body: dict) -> ChatResponse:
        started = time.monotonic()
        last_error: TransportError | None = None
        for attempt in range(1, self.max_attempts + 1):
            if attempt > 1:
                self._sleep(self.backoff_delay(attempt - 1))
            try:
                resp = self._client.post(url, json=body)
            except httpx.TimeoutException as exc:
                last_error = TransportError(f"timeout: {exc}", attempts=attempt)
                logger.info("attempt %d/%d timed out", attempt, self.max_attempts)
                continue
            except httpx.TransportError as exc:
                last_error = TransportError(f"connection error: {exc}", attempts=attempt)
                logger.info("attempt %d/%d connection error", attempt, self.max_attempts)
                continue

            status = resp.status_code
            if status == 429:
                last_error = RateLimited("rate limited (429)", attempts=attempt, status=429)
                logger.info("attempt %d/%d rate limited", attempt, self.max_attempts)
                continue
            if status >= 500:
                last_error = TransportError(f"server error {status}", attempts=attempt, status=status)
                logger.info("attempt %d/%d server error %d", attempt, self.max_attempts, status)
                continue
            if status >= 400:
                raise BadRequest(f"HTTP {status}: {resp.text[:200]}", status=status)
            return self._parse(resp, attempt, time.monotonic() - started)

        assert last_error is not None
        last_error.attempts = self.max_attempts
        raise last_error

    @staticmethod
    def _parse(resp: httpx.Response, attempts: int, latency: float) -> ChatResponse:
        try:
            payload = resp.json()
            content = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"response lacks choices[0].message.content: {exc!r}") from exc
        if not isinstance(content, str):
            raise MalformedResponse("message content is not a string")
        usage = payload.get("usage") or {}
        try:
            tokens = Usage(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)))
        except (TypeError, ValueError, AttributeError):
            tokens = Usage()
        return ChatResponse(content=content, usage=tokens, latency=latency, attempts=attempts)


class Matcher(str, enum.Enum):
    EXACT_PROMPT = "exact"
    CONTAINS = "contains"
    STAGE_LABEL = "stage"


_MATCHER_NAMES = {
    "exact": Matcher.EXACT_PROMPT,
    "exactprompt": Matcher.EXACT_PROMPT,
    "contains": Matcher.CONTAINS,
    "containssubstring": Matcher.CONTAINS,
    "stage": Matcher.STAGE_LABEL,
    "stagelabel": Matcher.STAGE_LABEL,
}


@dataclass(frozen=True)
class ScriptedRule:
    matcher: Matcher
    pattern: str
    responses: tuple[str, ...]
    name: str = ""

    def __post_init__(self) -> None:
        if not self.responses:
            raise ScriptError(f"rule {self.label} has an empty response queue")

    @property
    def label(self) -> str:
        return self.name or f"{self.matcher.value}:{self.pattern!r}"

    def matches(self, request: ChatRequest) -> bool:
        if self.matcher is Matcher.STAGE_LABEL:
            return request.stage == self.pattern
        text = prompt_text(request.messages)
        if self.matcher is Matcher.EXACT_PROMPT:
            return text == self.pattern
        return self.pattern in text


def _count_tokens(text: str) -> int:
    return len(text.split())


class ScriptedBackend:
    """Deterministic backend driven by first-match rules with response queues.

    Every match pops one response from the rule's queue, so one rule can script
    answers that change across iterations. A matched rule with an empty queue
    is an error, as is a request no rule matches.
    """

    def __init__(self, rules: Iterable[ScriptedRule]) -> None:
        self.rules = tuple(rules)
        if not self.rules:
            raise ScriptError("script has no rules")
        self._queues = [deque(rule.responses) for rule in self.rules]
        self._lock = threading.Lock()
        self.calls: list[ChatRequest] = []

    def fork(self) -> "ScriptedBackend":
        """A fresh copy with full queues, for running tasks independently."""
        return ScriptedBackend(self.rules)

    def _pop(self, request: ChatRequest) -> str:
        for rule, queue in zip(self.rules, self._queues):
            if not rule.matches(request):
                continue
            if not queue:
                raise ScriptExhausted(f"rule {rule.label} exhausted after {len(rule.responses)} responses")
            return queue.popleft()
        raise ScriptError(f"no rule matches request for stage {request.stage!r}")

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls.append(request)
            content = self._pop(request)
        usage = Usage(_count_tokens(prompt_text(request.messages)), _count_tokens(content))
        return ChatResponse(content=content, usage=usage, latency=0.0, attempts=1)

    def advance(self, request: ChatRequest, recorded: str) -> None:
        """Consume the response a resumed run already holds on record.

        Keeps the queues where an uninterrupted run would have them.
        """
        with self._lock:
            content = self._pop(request)
        if content != recorded:
            raise ScriptError(f"script diverges from the recorded {request.stage} output")


def rules_from_data(data) -> list[ScriptedRule]:
    if isinstance(data, dict):
        data = data.get("rules")
    if not isinstance(data, list) or not data:
        raise ScriptError("script must contain a non-empty 'rules' list")
    rules = []
    for i, item in enumerate(data):
        if not isinstance(item, dict):
            raise ScriptError(f"rule {i} is not an object")
        try:
            matcher = _MATCHER_NAMES[str(item["matcher"]).replace("_", "").lower()]
            pattern = item["pattern"]
            responses = item["responses"]
        except KeyError as exc:
            raise ScriptError(f"rule {i}: missing or unknown field {exc}") from None
        if isinstance(responses, str):
            responses = [responses]
        if not isinstance(pattern, str) or not isinstance(responses, list) or not all(
            isinstance(r, str) for r in responses
        ):
            raise ScriptError(f"rule {i}: pattern must be text and responses a list of text")
        rules.append(ScriptedRule(matcher, pattern, tuple(responses), name=item.get("name", "")))
    return rules


def script_from_file(path: str | Path) -> ScriptedBackend:
    """Build a scripted backend from a JSON rule file.

    Format: ``{"rules": [{"matcher": "stage"|"contains"|"exact", "pattern": ...,
    "responses": [...]}, ...]}``; a bare list of rules is accepted too.
    """
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise ScriptError(f"{path}: empty script file")
    try:
        data = json.loads(text)
    except ValueError as exc:
        raise ScriptError(f"{path}: not valid JSON: {exc}") from None
    return ScriptedBackend(rules_from_data(data))


def clone_for_run(backend: Backend) -> Backend:
    """Backend instance for one independent run (scripted queues are per run)."""
    if isinstance(backend, ScriptedBackend):
        return backend.fork()
    return backend


__all__ = [
    "Backend",
    "ChatRequest",
    "ChatResponse",
    "HttpBackend",
    "Matcher",
    "ScriptedBackend",
    "ScriptedRule",
    "Usage",
    "clone_for_run",
    "rules_from_data",
    "script_from_file",
]
