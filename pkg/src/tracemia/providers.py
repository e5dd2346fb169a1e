"""Obtaining reasoning traces from target models.

A :class:`Provider` couples a :class:`ProviderConfig` with a backend (live
HTTP or the offline simulator) and a :class:`~tracemia.cache.TraceCache`.
Every completion is cached under a hash of everything that can change its
output, so reruns against a warm cache never touch the backend.
"""

from __future__ import annotations

import datetime as _dt
import logging
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Iterable, Protocol, Sequence, TypeVar

import httpx

from .cache import NullCache, TraceCache, cache_key
from .dataset import QuerySequence
from .errors import (
    ApiError,
    MissingTraceField,
    OfflineError,
    ProviderError,
    RateLimited,
    TemplateError,
)

log = logging.getLogger(__name__)

PLACEHOLDER = "{sequence}"


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 1.0
    max_output_tokens: int = 2048

    def canonical(self) -> dict:
        # repr-stable floats so 1 and 1.0 hash the same
        return {"temperature": float(self.temperature),
                "max_output_tokens": int(self.max_output_tokens)}


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    backoff_base_ms: int = 500


@dataclass(frozen=True)
class ProviderConfig:
    provider_id: str
    model_id: str
    endpoint: str = ""
    auth: str | None = None  # name of the env var holding the API key
    sampling: SamplingParams = field(default_factory=SamplingParams)
    reasoning_field_path: str = "choices.0.message.reasoning_content"
    max_in_flight: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    timeout_s: float = 120.0
    backend: str = "http"  # "http" or "simulator"

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.retry.max_attempts < 1:
            raise ValueError("retry.max_attempts must be >= 1")
        if self.retry.backoff_base_ms < 1:
            raise ValueError("retry.backoff_base_ms must be >= 1")
        if self.backend not in ("http", "simulator"):
            raise ValueError(f"unknown backend {self.backend!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ProviderConfig":
        d = dict(d)
        sampling = SamplingParams(**d.pop("sampling", {}))
        retry = RetryPolicy(**d.pop("retry", {}))
        return cls(sampling=sampling, retry=retry, **d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ReasoningTrace:
    sequence_id: str
    trace_text: str
    sample_index: int
    model_id: str
    retrieved_at: str
    from_cache: bool = False

    def __post_init__(self):
        if not self.trace_text:
            raise ValueError("trace_text must be non-empty")
        if self.sample_index < 0:
            raise ValueError("sample_index must be >= 0")


# prompt templates

RECALL_KEYWORDS = ("seen", "recall", "remember", "recognize", "familiar")
CONTINUATION_KEYWORDS = ("next word", "next token", "continue", "continuation", "comes next")

DEFAULT_TEMPLATE_TEXT = (
    "Have you seen the following text before? First try to recall whether it "
    "appears in material you were trained on, then predict the next word that "
    "follows it.\n\nText: {sequence}"
)


@dataclass(frozen=True)
class PromptTemplate:
    template_text: str = DEFAULT_TEMPLATE_TEXT

    def __post_init__(self):
        n = self.template_text.count(PLACEHOLDER)
        if n != 1:
            raise TemplateError(f"template must contain exactly one {PLACEHOLDER} placeholder, found {n}")

    def lint(
        self,
        recall_keywords: Iterable[str] = RECALL_KEYWORDS,
        continuation_keywords: Iterable[str] = CONTINUATION_KEYWORDS,
    ) -> list[str]:
        """Return a list of problems; empty when the template is usable."""
        text = self.template_text.lower()
        problems = []
        if not any(k.lower() in text for k in recall_keywords):
            problems.append("template does not ask the model to recall whether it has seen the input")
        if not any(k.lower() in text for k in continuation_keywords):
            problems.append("template does not pose a next-word continuation task")
        return problems

    def split(self) -> tuple[str, str]:
        prefix, suffix = self.template_text.split(PLACEHOLDER)
        return prefix, suffix

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "PromptTemplate":
        with open(path, encoding="utf-8") as f:
            return cls(f.read())


def render_prompt(template: PromptTemplate, sequence: QuerySequence | str) -> str:
    text = sequence.text if isinstance(sequence, QuerySequence) else sequence
    prefix, suffix = template.split()
    return prefix + text + suffix


# response handling

def extract_field(response: Any, path: str) -> str:
    """Walk a dotted path (``choices.0.message.reasoning_content``)."""
    node = response
    for part in path.split("."):
        if isinstance(node, list):
            try:
                node = node[int(part)]
            except (ValueError, IndexError):
                raise MissingTraceField(path) from None
        elif isinstance(node, dict):
            if part not in node:
                raise MissingTraceField(path)
            node = node[part]
        else:
            raise MissingTraceField(path)
    if not isinstance(node, str) or not node.strip():
        # an empty trace is an error, not a value
        raise MissingTraceField(path)
    return node


def is_transient(err: ProviderError) -> bool:
    if not isinstance(err, ApiError):
        return False
    return err.status is None or err.status == 429 or err.status >= 500


class Backend(Protocol):
    is_network: bool

    def __call__(self, config: ProviderConfig, body: dict, sample_index: int) -> dict: ...


class HttpBackend:
    """Chat-completions style JSON POST."""

    is_network = True

    def __init__(self, client: httpx.Client | None = None):
        self._client = client
        self._own_client = client is None
        self._lock = threading.Lock()

    def _get_client(self, timeout: float) -> httpx.Client:
        with self._lock:
            if self._client is None:
                self._client = httpx.Client(timeout=timeout)
            return self._client

    def __call__(self, config: ProviderConfig, body: dict, sample_index: int) -> dict:
        headers = {"Content-Type": "application/json"}
        if config.auth:
            secret = os.environ.get(config.auth)
            if secret is None:
                raise ProviderError(f"environment variable {config.auth} is not set")
            headers["Authorization"] = f"Bearer {secret}"
        client = self._get_client(config.timeout_s)
        try:
            resp = client.post(config.endpoint, json=body, headers=headers)
        except httpx.TimeoutException as e:
            raise ApiError(None, f"timeout: {e}") from None
        except httpx.TransportError as e:
            raise ApiError(None, f"transport error: {e}") from None
        if resp.status_code != 200:
            raise ApiError(resp.status_code, resp.text[:200])
        try:
            return resp.json()
        except ValueError:
            raise ApiError(resp.status_code, "response is not JSON") from None

    def close(self):
        if self._own_client and self._client is not None:
            self._client.close()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Provider:
    def __init__(
        self,
        config: ProviderConfig,
        backend: Backend | None = None,
        cache: TraceCache | None = None,
        offline: bool = False,
        sleep: Callable[[float], None] = time.sleep,
        seed: int | None = None,
        key_salt: dict | None = None,
    ):
        self.config = config
        # anything besides the request that determines the output (simulator settings)
        self.key_salt = dict(key_salt) if key_salt else None
        self.backend = backend if backend is not None else HttpBackend()
        self.cache = cache if cache is not None else NullCache()
        self.offline = offline
        self._sleep = sleep
        self._jitter = random.Random(seed)
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self._count_lock = threading.Lock()
        self.backend_calls = 0

    @property
    def namespace(self) -> str:
        return self.config.provider_id

    def key_inputs(self, prompt: str | list[dict], sample_index: int) -> dict:
        inputs = {
            "provider_id": self.config.provider_id,
            "model_id": self.config.model_id,
            "prompt": prompt,
            "sampling": self.config.sampling.canonical(),
            "sample_index": sample_index,
        }
        if self.key_salt:
            inputs["salt"] = self.key_salt
        return inputs

    def _request(self, messages: list[dict], sample_index: int) -> dict:
        body = {
            "model": self.config.model_id,
            "messages": messages,
            "temperature": self.config.sampling.temperature,
            "max_tokens": self.config.sampling.max_output_tokens,
        }
        policy = self.config.retry
        for attempt in range(policy.max_attempts):
            try:
                with self._slots:
                    with self._count_lock:
                        self.backend_calls += 1
                    return self.backend(self.config, body, sample_index)
            except ProviderError as err:
                if not is_transient(err) or attempt == policy.max_attempts - 1:
                    if isinstance(err, ApiError) and err.status == 429:
                        raise RateLimited(f"gave up after {attempt + 1} attempts") from err
                    raise
                delay = policy.backoff_base_ms / 1000 * 2 ** attempt
                delay = self._jitter.uniform(0.5 * delay, delay)
                log.warning("transient failure (%s); retrying in %.2fs", err, delay)
                self._sleep(delay)
        raise AssertionError("unreachable")

    def complete(self, messages: list[dict], sample_index: int = 0) -> tuple[str, bool, str]:
        """Return ``(text, from_cache, retrieved_at)`` for a message list."""
        prompt: str | list[dict]
        if len(messages) == 1 and messages[0].get("role") == "user":
            prompt = messages[0]["content"]
        else:
            prompt = messages
        inputs = self.key_inputs(prompt, sample_index)
        key = cache_key(inputs)
        hit = self.cache.get(self.namespace, key)
        if hit is not None:
            return hit["trace_text"], True, hit["retrieved_at"]
        if self.offline and getattr(self.backend, "is_network", True):
            raise OfflineError(f"cache miss for {self.config.provider_id} while offline")
        response = self._request(messages, sample_index)
        text = extract_field(response, self.config.reasoning_field_path)
        retrieved_at = _now()
        self.cache.put(self.namespace, key, {
            "key_inputs": inputs, "trace_text": text, "retrieved_at": retrieved_at,
        })
        return text, False, retrieved_at

    def fetch_trace(self, prompt: str, sample_index: int = 0, sequence_id: str = "") -> ReasoningTrace:
        text, from_cache, retrieved_at = self.complete(
            [{"role": "user", "content": prompt}], sample_index)
        return ReasoningTrace(sequence_id, text, sample_index, self.config.model_id,
                              retrieved_at, from_cache)

    def fetch_traces_repeated(self, prompt: str, k: int, sequence_id: str = "") -> list[ReasoningTrace]:
        if k < 1:
            raise ValueError("k must be >= 1")
        traces = []
        for i in range(k):
            try:
                traces.append(self.fetch_trace(prompt, i, sequence_id))
            except ProviderError as err:
                err.sample_index = i
                raise
        return traces


def fetch_trace(provider: Provider, prompt: str, sample_index: int = 0) -> ReasoningTrace:
    return provider.fetch_trace(prompt, sample_index)


def fetch_traces_repeated(provider: Provider, prompt: str, k: int) -> list[ReasoningTrace]:
    return provider.fetch_traces_repeated(prompt, k)


# compression defense

COMPRESSION_SYSTEM = "You are a helpful assistant who summarizes reasoning paths into concise summaries."
COMPRESSION_LEVELS = {"mild": "5-6", "strong": "2-3"}


def compression_messages(trace_text: str, level: str) -> list[dict]:
    if level not in COMPRESSION_LEVELS:
        raise ValueError(f"unknown compression level {level!r}")
    instruction = (
        "Please read the following reasoning path and provide a concise summary in "
        f"{COMPRESSION_LEVELS[level]} sentences."
    )
    return [
        {"role": "system", "content": COMPRESSION_SYSTEM},
        {"role": "user", "content": f"{instruction}\n\nReasoning path:\n{trace_text}"},
    ]


def compress_trace(judge: Provider, trace: ReasoningTrace, level: str) -> ReasoningTrace:
    """Rewrite a trace into a short summary using a judge model."""
    text, from_cache, retrieved_at = judge.complete(compression_messages(trace.trace_text, level))
    return replace(trace, trace_text=text, model_id=f"{trace.model_id}+{level}-compressed",
                   retrieved_at=retrieved_at, from_cache=from_cache)


T = TypeVar("T")
R = TypeVar("R")


def map_concurrent(fn: Callable[[T], R], items: Sequence[T], max_workers: int) -> list[R | BaseException]:
    """Apply ``fn`` over items with a thread pool; exceptions are returned in place."""
    def wrapped(item):
        try:
            return fn(item)
        except Exception as e:  # noqa: BLE001 - caller inspects per-item failures
            return e

    if max_workers <= 1 or len(items) <= 1:
        return [wrapped(i) for i in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(wrapped, items))


_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text: str) -> list[str]:
    return [s for s in _SENTENCE_END.split(text.strip()) if s]
