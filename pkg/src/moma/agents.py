"""Client layer for text-generation and embedding backends.

Remote backends speak the OpenAI-compatible wire protocol
(``POST /v1/chat/completions`` and ``POST /v1/embeddings``). Mock backends are
plain Python callables registered by name, so every test and the synthetic
experiments run offline.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import mimetypes
import os
import random
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import httpx
import numpy as np

log = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})

BACKOFF_BASE = 0.5
BACKOFF_MULTIPLIER = 2.0
BACKOFF_JITTER = 0.1


class AgentError(RuntimeError):
    """Base class for backend failures."""


class AgentTimeout(AgentError):
    pass


class ProtocolError(AgentError):
    """The backend answered with something that is not a valid response."""


class NonRetryableStatus(AgentError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status


class RetriesExhausted(AgentError):
    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class VisionNotSupported(AgentError):
    pass


class DimensionMismatch(AgentError, ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AgentConfig:
    agent_id: str
    backend: str = "mock"
    model_name: str = "echo"
    endpoint_url: str | None = None
    temperature: float = 0.0
    max_tokens: int = 512
    timeout: float = 60.0
    max_retries: int = 3
    requests_in_flight_limit: int = 4
    supports_vision: bool = False
    embedding_dim: int | None = None
    api_key_env: str | None = None

    def __post_init__(self):
        if not self.agent_id:
            raise ConfigError("agent_id must be nonempty")
        if self.backend not in ("remote", "mock"):
            raise ConfigError(f"agent {self.agent_id!r}: backend must be 'remote' or 'mock'")
        if self.backend == "remote" and not self.endpoint_url:
            raise ConfigError(f"agent {self.agent_id!r}: remote backend needs endpoint_url")
        if self.temperature < 0:
            raise ConfigError(f"agent {self.agent_id!r}: temperature must be >= 0")
        if self.max_tokens < 1 or self.requests_in_flight_limit < 1 or self.max_retries < 0:
            raise ConfigError(f"agent {self.agent_id!r}: max_tokens and in-flight limit must be positive")
        if self.embedding_dim is not None and self.embedding_dim < 1:
            raise ConfigError(f"agent {self.agent_id!r}: embedding_dim must be positive")

    @property
    def fingerprint(self) -> str:
        where = self.endpoint_url if self.backend == "remote" else "mock"
        return f"{self.model_name}@{where}"

    def sampling_params(self) -> dict:
        return {"temperature": self.temperature, "max_tokens": self.max_tokens}

    @classmethod
    def from_dict(cls, agent_id: str, d: dict) -> "AgentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"agent {agent_id!r}: unknown fields {sorted(unknown)}")
        return cls(**{**d, "agent_id": agent_id})


@dataclass(frozen=True)
class AgentRequest:
    prompt: str
    attachments: tuple[str, ...] = ()
    temperature: float | None = None
    max_tokens: int | None = None

    def __post_init__(self):
        # An empty prompt is allowed only when the payload is the attachment itself.
        if not self.prompt and not self.attachments:
            raise ValueError("prompt must be nonempty")


@dataclass(frozen=True)
class AgentResponse:
    text: str
    backend_fingerprint: str
    latency: float
    retry_count: int


@dataclass(frozen=True)
class EmbeddingResponse:
    vector: tuple[float, ...]
    dimension: int

    def __post_init__(self):
        if len(self.vector) != self.dimension:
            raise DimensionMismatch(f"vector length {len(self.vector)} != dimension {self.dimension}")
        if not all(math.isfinite(v) for v in self.vector):
            raise ProtocolError("embedding contains non-finite values")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vector, dtype=np.float64)


# -- mock registry ---------------------------------------------------------

CompletionFn = Callable[[str, tuple], str]
EmbeddingFn = Callable[[str, int], list]

_COMPLETION_MOCKS: dict[str, CompletionFn] = {}
_EMBEDDING_MOCKS: dict[str, EmbeddingFn] = {}


def register_mock(name: str, fn: CompletionFn) -> None:
    """Register ``fn(prompt, attachments) -> text`` as mock model ``name``."""
    _COMPLETION_MOCKS[name] = fn


def register_mock_embedder(name: str, fn: EmbeddingFn) -> None:
    """Register ``fn(text, dim) -> vector`` as mock embedding model ``name``."""
    _EMBEDDING_MOCKS[name] = fn


def _file_caption(prompt: str, attachments: tuple) -> str:
    # Stands in for a vision model: the "image" file carries its own finding text.
    return "\n".join(Path(a).read_text(encoding="utf-8").strip() for a in attachments)


def _table_digest(prompt: str, attachments: tuple) -> str:
    # Echo the tab-separated table that follows the last blank line of the prompt.
    return prompt.rsplit("\n\n", 1)[-1]


def _seed_from_text(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def hash_embedding(text: str, dim: int) -> list:
    """Unit vector drawn from a generator seeded by the SHA-256 of ``text``."""
    rng = np.random.default_rng(_seed_from_text(text))
    v = rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).tolist()


_TOKEN = re.compile(r"[A-Za-z0-9_\-]+")


def bag_of_words_embedding(text: str, dim: int) -> list:
    """Signed feature hashing of lower-cased tokens, L2-normalised."""
    v = np.zeros(dim)
    for tok in _TOKEN.findall(text.lower()):
        h = _seed_from_text(tok)
        v[h % dim] += 1.0 if (h >> 32) & 1 else -1.0
    n = np.linalg.norm(v)
    return (v / n if n > 0 else v).tolist()


register_mock("echo", lambda prompt, attachments: prompt)
register_mock("reverse", lambda prompt, attachments: prompt[::-1])
register_mock("file-caption", _file_caption)
register_mock("table-digest", _table_digest)
register_mock_embedder("hash", hash_embedding)
register_mock_embedder("bow", bag_of_words_embedding)


def known_mock(cfg: AgentConfig) -> bool:
    return cfg.model_name in _COMPLETION_MOCKS or cfg.model_name in _EMBEDDING_MOCKS


# -- client ----------------------------------------------------------------

def backoff_delays(max_retries: int, rng: random.Random | None = None,
                   base: float = BACKOFF_BASE, multiplier: float = BACKOFF_MULTIPLIER,
                   jitter: float = BACKOFF_JITTER) -> list[float]:
    """Sleep durations before retry 1..max_retries.

    With jitter below (multiplier - 1) / (multiplier + 1) the sequence is
    nondecreasing whatever the random draws.
    """
    rng = rng or random.Random()
    return [base * multiplier ** i * (1 + rng.uniform(-jitter, jitter)) for i in range(max_retries)]


def _data_url(path: str) -> str:
    mime = mimetypes.guess_type(path)[0] or "application/octet-stream"
    payload = base64.b64encode(Path(path).read_bytes()).decode("ascii")
    return f"data:{mime};base64,{payload}"


def chat_payload(cfg: AgentConfig, req: AgentRequest) -> dict:
    if req.attachments:
        content: Any = [{"type": "text", "text": req.prompt}]
        content += [{"type": "image_url", "image_url": {"url": _data_url(a)}} for a in req.attachments]
    else:
        content = req.prompt
    return {
        "model": cfg.model_name,
        "messages": [{"role": "user", "content": content}],
        "temperature": cfg.temperature if req.temperature is None else req.temperature,
        "max_tokens": cfg.max_tokens if req.max_tokens is None else req.max_tokens,
    }


class AgentClient:
    """Shared client enforcing a per-backend in-flight limit.

    ``call_counts`` counts backend invocations per agent_id (mock or remote),
    which is what tests and run logs use to prove cache hits.
    """

    def __init__(self, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep,
                 transcript_path: str | Path | None = None, rng: random.Random | None = None):
        self._http = httpx.Client(transport=transport)
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._gates: dict[str, threading.BoundedSemaphore] = {}
        self._lock = threading.Lock()
        self._transcript = Path(transcript_path) if transcript_path else None
        self.call_counts: Counter = Counter()
        self.sleeps: list[float] = []

    def close(self) -> None:
        self._http.close()

    def _gate(self, cfg: AgentConfig) -> threading.BoundedSemaphore:
        with self._lock:
            gate = self._gates.get(cfg.fingerprint)
            if gate is None:
                gate = self._gates[cfg.fingerprint] = threading.BoundedSemaphore(cfg.requests_in_flight_limit)
            return gate

    def _count(self, cfg: AgentConfig) -> None:
        with self._lock:
            self.call_counts[cfg.agent_id] += 1

    @property
    def total_calls(self) -> int:
        return sum(self.call_counts.values())

    def _log_transcript(self, cfg: AgentConfig, request: dict, response: Any) -> None:
        if self._transcript is None:
            return
        line = json.dumps({"agent_id": cfg.agent_id, "request": request, "response": response}, sort_keys=True)
        with self._lock, self._transcript.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def _post(self, cfg: AgentConfig, route: str, body: dict) -> tuple[dict, int]:
        url = cfg.endpoint_url.rstrip("/") + route
        headers = {}
        if cfg.api_key_env:
            key = os.environ.get(cfg.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        delays = backoff_delays(cfg.max_retries, self._rng)
        last: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                self.sleeps.append(delays[attempt - 1])
                self._sleep(delays[attempt - 1])
            try:
                with self._gate(cfg):
                    self._count(cfg)
                    resp = self._http.post(url, json=body, headers=headers, timeout=cfg.timeout)
            except httpx.TimeoutException as exc:
                last = AgentTimeout(f"{cfg.agent_id}: timed out after {cfg.timeout}s")
                last.__cause__ = exc
                continue
            except httpx.TransportError as exc:
                last = AgentError(f"{cfg.agent_id}: transport error: {exc}")
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last = AgentError(f"{cfg.agent_id}: HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise NonRetryableStatus(resp.status_code, resp.text)
            try:
                data = resp.json()
            except ValueError:
                raise ProtocolError(f"{cfg.agent_id}: response is not JSON") from None
            self._log_transcript(cfg, body, data)
            return data, attempt
        if isinstance(last, AgentTimeout):
            raise last
        raise RetriesExhausted(f"{last} (gave up after {cfg.max_retries + 1} attempts)", cfg.max_retries + 1)

    def complete(self, cfg: AgentConfig, req: AgentRequest) -> AgentResponse:
        if req.attachments and not cfg.supports_vision:
            raise VisionNotSupported(f"agent {cfg.agent_id!r} does not accept image attachments")
        start = time.monotonic()
        if cfg.backend == "mock":
            fn = _COMPLETION_MOCKS.get(cfg.model_name)
            if fn is None:
                raise ConfigError(f"no mock registered under {cfg.model_name!r}")
            with self._gate(cfg):
                self._count(cfg)
                text = fn(req.prompt, tuple(req.attachments))
            return AgentResponse(text, cfg.fingerprint, time.monotonic() - start, 0)

        body = chat_payload(cfg, req)
        data, retries = self._post(cfg, "/v1/chat/completions", body)
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ProtocolError(f"{cfg.agent_id}: malformed chat completion response") from None
        if not isinstance(text, str):
            raise ProtocolError(f"{cfg.agent_id}: message content is not text")
        return AgentResponse(text, cfg.fingerprint, time.monotonic() - start, retries)

    def embed_last_hidden(self, cfg: AgentConfig, text: str, expected_dim: int | None = None) -> EmbeddingResponse:
        if not text:
            raise ValueError("text must be nonempty")
        if cfg.backend == "mock":
            fn = _EMBEDDING_MOCKS.get(cfg.model_name)
            if fn is None:
                raise ConfigError(f"no mock embedder registered under {cfg.model_name!r}")
            if cfg.embedding_dim is None:
                raise ConfigError(f"mock embedder {cfg.agent_id!r} needs embedding_dim")
            with self._gate(cfg):
                self._count(cfg)
                vector = [float(v) for v in fn(text, cfg.embedding_dim)]
        else:
            data, _ = self._post(cfg, "/v1/embeddings", {"model": cfg.model_name, "input": text})
            try:
                vector = [float(v) for v in data["data"][0]["embedding"]]
            except (KeyError, IndexError, TypeError, ValueError):
                raise ProtocolError(f"{cfg.agent_id}: malformed embedding response") from None
        declared = cfg.embedding_dim if cfg.embedding_dim is not None else len(vector)
        if len(vector) != declared:
            raise DimensionMismatch(f"{cfg.agent_id}: got {len(vector)} values, declared {declared}")
        if expected_dim is not None and declared != expected_dim:
            raise DimensionMismatch(f"{cfg.agent_id}: embedding dim {declared} != head input dim {expected_dim}")
        return EmbeddingResponse(tuple(vector), declared)


_default_client: AgentClient | None = None


def default_client() -> AgentClient:
    global _default_client
    if _default_client is None:
        _default_client = AgentClient()
    return _default_client


def complete(cfg: AgentConfig, req: AgentRequest) -> AgentResponse:
    return default_client().complete(cfg, req)


def embed_last_hidden(cfg: AgentConfig, text: str) -> EmbeddingResponse:
    return default_client().embed_last_hidden(cfg, text)

