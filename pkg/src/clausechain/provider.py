"""Chat-completion backends: an OpenAI-compatible HTTP client, a scripted
mock for tests and offline runs, and a persistent response cache that can
wrap either.

Every ``complete`` call is stateless: the payload carries exactly one user
message holding the rendered prompt, and nothing from earlier calls.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

import httpx

from .errors import (
    AuthenticationError,
    CacheMissError,
    ConfigError,
    FileAccessError,
    MalformedResponseError,
    NetworkError,
    ProviderError,
    RateLimitError,
    UnmatchedPromptError,
)

log = logging.getLogger(__name__)

API_KEY_ENV = "OPENAI_API_KEY"
CHAT_PATH = "/chat/completions"


class FinishReason(str, enum.Enum):
    COMPLETE = "complete"
    TRUNCATED = "truncated"
    REFUSED = "refused"
    ERROR = "error"


@dataclass(frozen=True)
class CompletionRequest:
    model_id: str
    prompt_text: str
    temperature: float = 0.0
    max_output_tokens: int | None = None
    template_version: int = 0

    def __post_init__(self):
        if not self.prompt_text:
            raise ValueError("prompt_text must be non-empty")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_output_tokens is not None and self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class CompletionResult:
    raw_text: str
    finish_reason: FinishReason = FinishReason.COMPLETE
    latency: float = 0.0
    from_cache: bool = False
    usage: dict[str, int] | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.raw_text and self.finish_reason is FinishReason.COMPLETE:
            raise MalformedResponseError("empty completion reported as complete")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["finish_reason"] = self.finish_reason.value
        del d["from_cache"]
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], from_cache: bool = False) -> "CompletionResult":
        return cls(
            raw_text=d["raw_text"],
            finish_reason=FinishReason(d.get("finish_reason", "complete")),
            latency=float(d.get("latency", 0.0)),
            from_cache=from_cache,
            usage=d.get("usage"),
        )


def cache_key(request: CompletionRequest, provider_id: str = "") -> str:
    """SHA-256 over the request fields in a fixed order.

    Order: provider id, model id, temperature, max output tokens, template
    version, prompt text, serialized as a compact JSON array.
    """
    fields = [
        provider_id,
        request.model_id,
        float(request.temperature),
        request.max_output_tokens,
        request.template_version,
        request.prompt_text,
    ]
    blob = json.dumps(fields, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Provider:
    """Base for completion backends.

    Subclasses implement ``_complete``; ``calls`` counts every request that
    reached this provider (successful or not).
    """

    provider_id = "provider"

    def __init__(self):
        self._count_lock = threading.Lock()
        self.calls = 0

    def complete(self, request: CompletionRequest) -> CompletionResult:
        with self._count_lock:
            self.calls += 1
        return self._complete(request)

    def _complete(self, request: CompletionRequest) -> CompletionResult:
        raise NotImplementedError

    def close(self) -> None:
        pass


# -- HTTP client -----------------------------------------------------------

_FINISH_MAP = {
    "stop": FinishReason.COMPLETE,
    "length": FinishReason.TRUNCATED,
    "content_filter": FinishReason.REFUSED,
}


def build_payload(request: CompletionRequest) -> dict:
    payload = {
        "model": request.model_id,
        "messages": [{"role": "user", "content": request.prompt_text}],
        "temperature": request.temperature,
    }
    if request.max_output_tokens is not None:
        payload["max_tokens"] = request.max_output_tokens
    return payload


def backoff_delay(attempt: int, base: float, cap: float, retry_after: float | None = None) -> float:
    """Delay before retry number ``attempt`` (1-based): base * 2**(attempt-1), capped."""
    if retry_after is not None:
        return min(cap, max(0.0, retry_after))
    return min(cap, base * (2 ** (attempt - 1)))


class OpenAIChatProvider(Provider):
    """Client for an OpenAI-compatible ``/chat/completions`` endpoint."""

    provider_id = "openai"

    def __init__(
        self,
        base_url: str,
        api_key: str,
        *,
        timeout: float = 120.0,
        max_attempts: int = 3,
        backoff_base: float = 1.0,
        backoff_cap: float = 30.0,
        max_concurrency: int = 8,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        provider_id: str | None = None,
    ):
        super().__init__()
        if max_attempts < 1:
            raise ConfigError("max_attempts must be at least 1")
        if provider_id:
            self.provider_id = provider_id
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max(1, max_concurrency))
        self._client = httpx.Client(
            base_url=base_url.rstrip("/"),
            timeout=timeout,
            transport=transport,
            headers={"Authorization": f"Bearer {api_key}"},
        )

    @classmethod
    def from_env(cls, base_url: str, env_var: str = API_KEY_ENV, **kwargs) -> "OpenAIChatProvider":
        key = os.environ.get(env_var)
        if not key:
            raise ConfigError(f"environment variable {env_var} is not set")
        return cls(base_url, key, **kwargs)

    def close(self) -> None:
        self._client.close()

    def _complete(self, request: CompletionRequest) -> CompletionResult:
        payload = build_payload(request)
        attempt = 0
        while True:
            attempt += 1
            try:
                with self._slots:
                    return self._post_once(payload)
            except ProviderError as exc:
                if not exc.retryable or attempt >= self.max_attempts:
                    raise
                delay = backoff_delay(attempt, self.backoff_base, self.backoff_cap, getattr(exc, "retry_after", None))
                log.warning("attempt %d/%d failed (%s); retrying in %.1fs", attempt, self.max_attempts, exc, delay)
                self._sleep(delay)

    def _post_once(self, payload: dict) -> CompletionResult:
        started = time.perf_counter()
        try:
            response = self._client.post(CHAT_PATH, json=payload)
        except httpx.TimeoutException as exc:
            raise NetworkError(f"request timed out: {exc}") from exc
        except httpx.TransportError as exc:
            raise NetworkError(f"cannot reach endpoint: {exc}") from exc
        latency = time.perf_counter() - started

        status = response.status_code
        if status in (401, 403):
            raise AuthenticationError(f"endpoint rejected credentials (HTTP {status})")
        if status == 429:
            raise RateLimitError("rate limited (HTTP 429)", _retry_after(response))
        if status >= 500:
            raise NetworkError(f"server error (HTTP {status})")
        if status >= 400:
            raise ProviderError(f"request rejected (HTTP {status}): {response.text[:200]}")
        return parse_completion(response, latency)


def _retry_after(response: httpx.Response) -> float | None:
    value = response.headers.get("retry-after")
    try:
        return float(value) if value is not None else None
    except ValueError:
        return None


def parse_completion(response: httpx.Response, latency: float = 0.0) -> CompletionResult:
    try:
        body = response.json()
        choice = body["choices"][0]
        message = choice.get("message") or {}
    except (ValueError, KeyError, IndexError, TypeError, AttributeError) as exc:
        raise MalformedResponseError(f"unexpected response shape: {response.text[:200]}") from exc
    content = message.get("content") or ""
    if not isinstance(content, str):
        raise MalformedResponseError("message content is not a string")
    if message.get("refusal"):
        reason = FinishReason.REFUSED
        content = content or str(message["refusal"])
    else:
        reason = _FINISH_MAP.get(choice.get("finish_reason"), FinishReason.COMPLETE)
    if not content and reason is FinishReason.COMPLETE:
        reason = FinishReason.ERROR
    usage = body.get("usage") if isinstance(body.get("usage"), dict) else None
    return CompletionResult(raw_text=content, finish_reason=reason, latency=latency, usage=usage)


# -- scripted mock ---------------------------------------------------------

Predicate = Callable[[str], bool]

_ERRORS = {
    "network": NetworkError,
    "rate_limit": RateLimitError,
    "auth": AuthenticationError,
    "malformed": MalformedResponseError,
}


def _as_predicate(pattern) -> Predicate:
    if callable(pattern) and not isinstance(pattern, (str, re.Pattern)):
        return pattern
    if isinstance(pattern, re.Pattern):
        return lambda prompt: pattern.search(prompt) is not None
    if isinstance(pattern, str):
        return lambda prompt: pattern in prompt
    raise TypeError(f"unsupported predicate {pattern!r}")


class ScriptedProvider(Provider):
    """Deterministic provider answering from an ordered list of rules.

    Each rule pairs a predicate (substring, compiled regex, or callable on
    the prompt) with a response: a string, a callable taking the request,
    or an exception instance to raise. The first matching rule wins.
    Requests are recorded in call order.
    """

    provider_id = "mock"

    def __init__(self, rules: Iterable[tuple[Any, Any]] = (), default: str | None = None, latency: float = 0.0):
        super().__init__()
        self.rules = [(_as_predicate(p), r) for p, r in rules]
        self.default = default
        self.latency = latency
        self.requests: list[CompletionRequest] = []
        self._lock = threading.Lock()

    def _complete(self, request: CompletionRequest) -> CompletionResult:
        with self._lock:
            self.requests.append(request)
        for predicate, response in self.rules:
            if predicate(request.prompt_text):
                return self._respond(response, request)
        if self.default is not None:
            return self._respond(self.default, request)
        raise UnmatchedPromptError(f"no scripted response for prompt starting {request.prompt_text[:60]!r}")

    def _respond(self, response, request: CompletionRequest) -> CompletionResult:
        if isinstance(response, BaseException):
            raise response
        if callable(response):
            response = response(request)
        if isinstance(response, CompletionResult):
            return response
        return CompletionResult(raw_text=response, latency=self.latency)

    @classmethod
    def from_script(cls, script: Mapping[str, Any]) -> "ScriptedProvider":
        """Build from the JSON script format.

        ``{"rules": [{"contains": "...", "response": "..."},
                     {"regex": "...", "error": "network"}], "default": "..."}``
        """
        rules = []
        for i, rule in enumerate(script.get("rules", [])):
            if "contains" in rule:
                predicate = rule["contains"]
            elif "regex" in rule:
                predicate = re.compile(rule["regex"], re.DOTALL)
            else:
                raise ConfigError(f"script rule #{i + 1} needs 'contains' or 'regex'")
            if "error" in rule:
                kind = _ERRORS.get(rule["error"])
                if kind is None:
                    raise ConfigError(f"script rule #{i + 1}: unknown error kind {rule['error']!r}")
                response = kind(rule.get("message", f"scripted {rule['error']} error"))
            elif "response" in rule:
                response = rule["response"]
            else:
                raise ConfigError(f"script rule #{i + 1} needs 'response' or 'error'")
            rules.append((predicate, response))
        return cls(rules, default=script.get("default"))

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedProvider":
        try:
            script = json.loads(Path(path).read_text("utf-8"))
        except OSError as exc:
            raise FileAccessError(f"{path}: cannot read script: {exc.strerror or exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: script is not valid JSON: {exc.msg}") from exc
        return cls.from_script(script)


def scripted_mock(script: Mapping[Any, Any] | Iterable[tuple[Any, Any]], default: str | None = None) -> ScriptedProvider:
    rules = script.items() if isinstance(script, Mapping) else script
    return ScriptedProvider(rules, default=default)


class ReplayProvider(Provider):
    """Upstream that never answers; behind a cache it turns misses into errors."""

    def __init__(self, provider_id: str = "openai"):
        super().__init__()
        self.provider_id = provider_id

    def _complete(self, request: CompletionRequest) -> CompletionResult:
        raise CacheMissError(f"replay: no cached completion for model {request.model_id}")


# -- cache -----------------------------------------------------------------


@dataclass(frozen=True)
class CacheEntry:
    key: str
    request: dict
    result: CompletionResult
    created_at: str

    def to_json(self) -> str:
        return json.dumps(
            {"key": self.key, "request": self.request, "result": self.result.to_dict(), "created_at": self.created_at},
            ensure_ascii=False,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "CacheEntry":
        d = json.loads(line)
        return cls(
            key=d["key"], request=d["request"], result=CompletionResult.from_dict(d["result"]), created_at=d["created_at"]
        )

    @property
    def created(self) -> datetime:
        return datetime.fromisoformat(self.created_at)


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


class ResponseCache:
    """Append-only JSON-lines store with an in-memory index.

    Reads are lock-free dict lookups; writes go through one lock. With
    ``path=None`` the cache lives in memory only.
    """

    def __init__(self, path: str | Path | None = None, clock: Callable[[], datetime] = _utcnow):
        self.path = Path(path) if path is not None else None
        self._clock = clock
        self._write_lock = threading.Lock()
        self._index: dict[str, CacheEntry] = {}
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        try:
            with self.path.open(encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        entry = CacheEntry.from_json(line)
                    except (ValueError, KeyError) as exc:
                        log.warning("%s:%d: skipping unreadable cache entry (%s)", self.path, lineno, exc)
                        continue
                    self._index[entry.key] = entry
        except OSError as exc:
            raise FileAccessError(f"{self.path}: cannot read cache: {exc.strerror or exc}") from exc

    def __len__(self):
        return len(self._index)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def get(self, key: str) -> CacheEntry | None:
        return self._index.get(key)

    def put(self, key: str, request: CompletionRequest, provider_id: str, result: CompletionResult) -> CacheEntry:
        summary = {
            "provider_id": provider_id,
            "model_id": request.model_id,
            "temperature": request.temperature,
            "max_output_tokens": request.max_output_tokens,
            "template_version": request.template_version,
            "prompt_sha256": hashlib.sha256(request.prompt_text.encode("utf-8")).hexdigest(),
            "prompt_chars": len(request.prompt_text),
        }
        entry = CacheEntry(key=key, request=summary, result=result, created_at=self._clock().isoformat())
        with self._write_lock:
            if self.path is not None:
                try:
                    self.path.parent.mkdir(parents=True, exist_ok=True)
                    with self.path.open("a", encoding="utf-8") as fh:
                        fh.write(entry.to_json() + "\n")
                except OSError as exc:
                    raise FileAccessError(f"{self.path}: cannot write cache: {exc.strerror or exc}") from exc
            self._index[key] = entry
        return entry

    def stats(self) -> dict:
        size = self.path.stat().st_size if self.path is not None and self.path.exists() else 0
        return {"entries": len(self._index), "bytes": size, "path": str(self.path) if self.path else None}

    def purge(self, older_than: timedelta | None = None) -> int:
        """Drop all entries, or those at least ``older_than`` old. Returns the number removed."""
        with self._write_lock:
            if older_than is None:
                keep: dict[str, CacheEntry] = {}
            else:
                cutoff = self._clock() - older_than
                keep = {k: e for k, e in self._index.items() if e.created > cutoff}
            removed = len(self._index) - len(keep)
            if self.path is not None and self.path.exists():
                tmp = self.path.with_suffix(self.path.suffix + ".tmp")
                try:
                    with tmp.open("w", encoding="utf-8") as fh:
                        for entry in keep.values():
                            fh.write(entry.to_json() + "\n")
                    tmp.replace(self.path)
                except OSError as exc:
                    raise FileAccessError(f"{self.path}: cannot rewrite cache: {exc.strerror or exc}") from exc
            self._index = keep
        return removed


class CachedProvider(Provider):
    """Cache in front of another provider, with single-flight per key.

    ``upstream_calls`` counts requests forwarded to the wrapped provider;
    ``hits`` counts answers served from the cache.
    """

    def __init__(self, inner: Provider, cache: ResponseCache | None = None):
        super().__init__()
        self.inner = inner
        self.cache = cache if cache is not None else ResponseCache()
        self.provider_id = inner.provider_id
        self.upstream_calls = 0
        self.hits = 0
        self._stats_lock = threading.Lock()
        self._inflight_lock = threading.Lock()
        self._inflight: dict[str, threading.Lock] = {}

    def _complete(self, request: CompletionRequest) -> CompletionResult:
        key = cache_key(request, self.provider_id)
        hit = self._lookup(key)
        if hit is not None:
            return hit
        with self._inflight_lock:
            key_lock = self._inflight.setdefault(key, threading.Lock())
        try:
            with key_lock:
                # another thread may have filled the key while we waited
                hit = self._lookup(key)
                if hit is not None:
                    return hit
                with self._stats_lock:
                    self.upstream_calls += 1
                result = self.inner.complete(request)
                if result.finish_reason is not FinishReason.ERROR:
                    self.cache.put(key, request, self.provider_id, result)
                return result
        finally:
            with self._inflight_lock:
                if self._inflight.get(key) is key_lock:
                    del self._inflight[key]

    def _lookup(self, key: str) -> CompletionResult | None:
        entry = self.cache.get(key)
        if entry is None:
            return None
        with self._stats_lock:
            self.hits += 1
        r = entry.result
        return CompletionResult(raw_text=r.raw_text, finish_reason=r.finish_reason, latency=r.latency, from_cache=True, usage=r.usage)

    def close(self) -> None:
        self.inner.close()
