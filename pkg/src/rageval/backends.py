"""Judge-LLM and embedding providers.

Three chat backends share one interface: an OpenAI-compatible HTTP client, a
deterministic scripted mock for tests and offline replays, and a caching
wrapper backed by an append-only response file. Vector similarity lives here
too because both the metric engine and the retriever use it.
"""

from __future__ import annotations

import abc
import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import httpx

logger = logging.getLogger(__name__)

API_KEY_ENV = "RAGEVAL_API_KEY"
BASE_URL_ENV = "RAGEVAL_BASE_URL"


class BackendError(Exception):
    """Base class for provider failures (network, HTTP, protocol)."""


class NetworkError(BackendError):
    pass


class HttpError(BackendError):
    def __init__(self, status: int, detail: str = ""):
        super().__init__(f"http status {status}" + (f": {detail}" if detail else ""))
        self.status = status


class RateLimitedError(HttpError):
    def __init__(self, detail: str = ""):
        super().__init__(429, detail)


class EmptyCompletionError(BackendError):
    pass


class UnmatchedRequestError(BackendError):
    def __init__(self, request_tag: str):
        super().__init__(f"no mock rule matches request tag {request_tag!r}")
        self.request_tag = request_tag


class DimMismatchError(ValueError):
    """Vectors disagree on dimension or embedding model."""


class ZeroVectorError(ValueError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    """One judge call: messages plus decoding settings.

    ``request_tag`` identifies metric, sample and step (for mock matching and
    call logs); it is not part of the wire payload or the cache key.
    """

    model: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    request_tag: str = ""

    def __post_init__(self) -> None:
        if not any(role == "user" for role, _ in self.messages):
            raise ValueError("at least one user message is required")
        for role, _ in self.messages:
            if role not in ("system", "user"):
                raise ValueError(f"unsupported message role {role!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    def rendered(self) -> str:
        """Canonical serialization of the wire-relevant fields, for digesting."""
        return json.dumps(
            {
                "model": self.model,
                "messages": [[role, content] for role, content in self.messages],
                "temperature": self.temperature,
                "max_tokens": self.max_tokens,
            },
            ensure_ascii=False,
            sort_keys=True,
            separators=(",", ":"),
        )


def user_request(
    model: str,
    content: str,
    request_tag: str = "",
    temperature: float = 0.0,
    max_tokens: int = 1024,
) -> ChatRequest:
    return ChatRequest(
        model=model,
        messages=(("user", content),),
        temperature=temperature,
        max_tokens=max_tokens,
        request_tag=request_tag,
    )


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    model_id: str

    @property
    def dim(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class CacheKey:
    backend_id: str
    model: str
    prompt_digest: str


def make_cache_key(backend_id: str, request: ChatRequest) -> CacheKey:
    digest = hashlib.sha256(request.rendered().encode("utf-8")).hexdigest()
    return CacheKey(backend_id=backend_id, model=request.model, prompt_digest=digest)


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Raw cosine of two vectors, unclamped; clamping is a metric-layer choice."""
    if a.dim != b.dim:
        raise DimMismatchError(f"dim mismatch: {a.dim} vs {b.dim}")
    if a.model_id != b.model_id:
        raise DimMismatchError(f"model mismatch: {a.model_id!r} vs {b.model_id!r}")
    norm_a = math.sqrt(math.fsum(x * x for x in a.values))
    norm_b = math.sqrt(math.fsum(x * x for x in b.values))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVectorError("cosine similarity is undefined for zero vectors")
    dot = math.fsum(x * y for x, y in zip(a.values, b.values))
    return dot / (norm_a * norm_b)


@dataclass
class CallRecord:
    request_tag: str
    model: str
    prompt_digest: str
    latency: float
    cached: bool


class ChatBackend(abc.ABC):
    """Completion provider; subclasses implement ``_complete``."""

    backend_id: str = "chat"

    def __init__(self) -> None:
        self.call_log: list[CallRecord] = []

    def chat_complete(self, request: ChatRequest) -> str:
        started = time.perf_counter()
        text, cached = self._complete(request)
        self.call_log.append(
            CallRecord(
                request_tag=request.request_tag,
                model=request.model,
                prompt_digest=make_cache_key(self.backend_id, request).prompt_digest,
                latency=time.perf_counter() - started,
                cached=cached,
            )
        )
        return text

    @abc.abstractmethod
    def _complete(self, request: ChatRequest) -> tuple[str, bool]:
        """Return (completion text, served_from_cache)."""


class EmbeddingBackend(abc.ABC):
    backend_id: str = "embedding"
    model_id: str = "embedding"

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        """Embed texts in order; all returned vectors share model_id and dim."""
        if not texts:
            raise ValueError("embed() requires a non-empty list of texts")
        if any(not isinstance(t, str) or not t.strip() for t in texts):
            raise ValueError("embed() requires non-empty texts")
        vectors = self._embed(list(texts))
        dims = {v.dim for v in vectors}
        if len(vectors) != len(texts) or len(dims) != 1:
            raise DimMismatchError(
                f"provider returned {len(vectors)} vectors with dims {sorted(dims)}"
            )
        return vectors

    @abc.abstractmethod
    def _embed(self, texts: list[str]) -> list[EmbeddingVector]: ...


class _HttpJson:
    """Shared POST-with-retry plumbing for the OpenAI-compatible endpoints."""

    def __init__(
        self,
        base_url: str | None,
        api_key: str | None,
        max_attempts: int,
        backoff_base: float,
        backoff_cap: float,
        timeout: float,
        client: httpx.Client | None = None,
    ):
        base_url = base_url or os.environ.get(BASE_URL_ENV)
        if not base_url:
            raise ValueError(f"no base URL configured (flag, config, or {BASE_URL_ENV})")
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.max_attempts = max(1, max_attempts)
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self._client = client or httpx.Client(timeout=timeout)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _delay(self, attempt: int, retry_after: str | None = None) -> float:
        if retry_after:
            try:
                return min(float(retry_after), self.backoff_cap)
            except ValueError:
                pass
        return min(self.backoff_base * (2 ** (attempt - 1)), self.backoff_cap)

    def post(self, path: str, payload: Mapping[str, Any]) -> dict[str, Any]:
        url = self.base_url + path
        last_error: BackendError | None = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                response = self._client.post(url, json=dict(payload), headers=self._headers())
            except httpx.HTTPError as exc:
                last_error = NetworkError(f"{type(exc).__name__}: {exc}")
                logger.debug("attempt %d/%d failed: %s", attempt, self.max_attempts, last_error)
            else:
                status = response.status_code
                if status == 200:
                    return response.json()
                if status == 429:
                    last_error = RateLimitedError(response.text[:200])
                    if attempt < self.max_attempts:
                        time.sleep(self._delay(attempt, response.headers.get("Retry-After")))
                    continue
                if 500 <= status < 600:
                    last_error = HttpError(status, response.text[:200])
                else:
                    # client errors are not retryable
                    raise HttpError(status, response.text[:200])
            if attempt < self.max_attempts:
                time.sleep(self._delay(attempt))
        assert last_error is not None
        raise last_error


class OpenAIChatBackend(ChatBackend):
    """OpenAI-compatible /chat/completions client with bounded retries."""

    backend_id = "openai-chat"

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        max_attempts: int = 3,
        backoff_base: float = 0.5,
        backoff_cap: float = 8.0,
        timeout: float = 60.0,
        seed: int | None = None,
        client: httpx.Client | None = None,
    ):
        super().__init__()
        self._http = _HttpJson(base_url, api_key, max_attempts, backoff_base, backoff_cap, timeout, client)
        self._seed = seed

    def _complete(self, request: ChatRequest) -> tuple[str, bool]:
        payload: dict[str, Any] = {
            "model": request.model,
            "messages": [{"role": role, "content": content} for role, content in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if self._seed is not None:
            payload["seed"] = self._seed
        data = self._http.post("/chat/completions", payload)
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise EmptyCompletionError("response has no choices[0].message.content") from None
        if not isinstance(content, str) or not content:
            raise EmptyCompletionError("completion content is empty")
        return content, False


class OpenAIEmbeddingBackend(EmbeddingBackend):
    """OpenAI-compatible /embeddings client."""

    backend_id = "openai-embedding"

    def __init__(
        self,
        model: str,
        base_url: str | None = None,
        api_key: str | None = None,
        max_attempts: int = 3,
        backoff_base: float = 0.5,
        backoff_cap: float = 8.0,
        timeout: float = 60.0,
        client: httpx.Client | None = None,
    ):
        self.model_id = model
        self._http = _HttpJson(base_url, api_key, max_attempts, backoff_base, backoff_cap, timeout, client)

    def _embed(self, texts: list[str]) -> list[EmbeddingVector]:
        data = self._http.post("/embeddings", {"model": self.model_id, "input": texts})
        try:
            rows = sorted(data["data"], key=lambda row: row.get("index", 0))
            vectors = [
                EmbeddingVector(values=tuple(float(x) for x in row["embedding"]), model_id=self.model_id)
                for row in rows
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"malformed embeddings response: {exc}") from exc
        return vectors


@dataclass(frozen=True)
class MockRule:
    """One scripted response; all provided match conditions must hold."""

    response: str
    request_tag_prefix: str | None = None
    prompt_substring: str | None = None

    def __post_init__(self) -> None:
        if self.request_tag_prefix is None and self.prompt_substring is None:
            raise ValueError("a mock rule needs request_tag_prefix or prompt_substring")

    def matches(self, request: ChatRequest) -> bool:
        if self.request_tag_prefix is not None:
            if not request.request_tag.startswith(self.request_tag_prefix):
                return False
        if self.prompt_substring is not None:
            if not any(self.prompt_substring in content for _, content in request.messages):
                return False
        return True


class ScriptedChatBackend(ChatBackend):
    """Deterministic rule-based mock; first matching rule wins.

    Total over its script: an unmatched request raises, naming the request
    tag, so silent test drift is impossible.
    """

    backend_id = "mock-chat"

    def __init__(self, rules: Sequence[MockRule]):
        super().__init__()
        self.rules = list(rules)

    @classmethod
    def from_script_file(cls, path: str | Path) -> "ScriptedChatBackend":
        with open(path, encoding="utf-8") as handle:
            entries = json.load(handle)
        rules = []
        for entry in entries:
            match = entry.get("match", {})
            rules.append(
                MockRule(
                    response=entry["response"],
                    request_tag_prefix=match.get("request_tag_prefix"),
                    prompt_substring=match.get("prompt_substring"),
                )
            )
        return cls(rules)

    def _complete(self, request: ChatRequest) -> tuple[str, bool]:
        for rule in self.rules:
            if rule.matches(request):
                return rule.response, False
        raise UnmatchedRequestError(request.request_tag)


class MockEmbedder(EmbeddingBackend):
    """Table-driven embeddings, with a deterministic hash fallback.

    With ``strict=True`` a text missing from the table raises; otherwise a
    reproducible unit vector is derived from the text digest, which keeps
    mock runs deterministic without exhaustive tables.
    """

    backend_id = "mock-embedding"

    def __init__(
        self,
        table: Mapping[str, Sequence[float]] | None = None,
        dim: int = 8,
        model_id: str = "mock-embedding",
        strict: bool = False,
    ):
        self.table = {k: tuple(float(x) for x in v) for k, v in (table or {}).items()}
        self.dim = dim
        self.model_id = model_id
        self.strict = strict

    def _hash_vector(self, text: str) -> tuple[float, ...]:
        raw = hashlib.shake_128(text.encode("utf-8")).digest(8 * self.dim)
        values = []
        for i in range(self.dim):
            chunk = int.from_bytes(raw[8 * i : 8 * (i + 1)], "little")
            values.append(2.0 * (chunk / 2.0**64) - 1.0)
        norm = math.sqrt(math.fsum(x * x for x in values))
        if norm == 0.0:
            values[0] = 1.0
            norm = 1.0
        return tuple(x / norm for x in values)

    def _embed(self, texts: list[str]) -> list[EmbeddingVector]:
        vectors = []
        for text in texts:
            if text in self.table:
                values = self.table[text]
            elif self.strict:
                raise UnmatchedRequestError(f"embed:{text[:40]}")
            else:
                values = self._hash_vector(text)
            vectors.append(EmbeddingVector(values=values, model_id=self.model_id))
        return vectors


class ResponseCache:
    """Persistent completion cache: an append-only JSONL file of (key, response).

    Loaded fully at startup; reads are lock-free, writes are serialized
    through a single lock. Replaying a cached key returns a byte-identical
    completion.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[tuple[str, str, str], str] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as handle:
                for line in handle:
                    if not line.strip():
                        continue
                    record = json.loads(line)
                    key = (record["backend_id"], record["model"], record["prompt_digest"])
                    self._entries[key] = record["response"]

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: CacheKey) -> str | None:
        return self._entries.get((key.backend_id, key.model, key.prompt_digest))

    def put(self, key: CacheKey, response: str) -> None:
        record = {
            "backend_id": key.backend_id,
            "model": key.model,
            "prompt_digest": key.prompt_digest,
            "response": response,
        }
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        with self._lock:
            self._entries[(key.backend_id, key.model, key.prompt_digest)] = response
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as handle:
                handle.write(line + "\n")
                handle.flush()


class CachingChatBackend(ChatBackend):
    """Wraps any chat backend with a persistent response cache."""

    def __init__(self, inner: ChatBackend, cache: ResponseCache):
        super().__init__()
        self.inner = inner
        self.cache = cache
        self.backend_id = inner.backend_id

    def _complete(self, request: ChatRequest) -> tuple[str, bool]:
        key = make_cache_key(self.backend_id, request)
        hit = self.cache.get(key)
        if hit is not None:
            return hit, True
        text = self.inner.chat_complete(request)
        self.cache.put(key, text)
        return text, False
