"""Text encoders and the vector operations applied to trace embeddings.

Vectors are plain 1-D float64 numpy arrays.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import httpx
import numpy as np

from .cache import NullCache, TraceCache, cache_key
from .errors import DimensionMismatch, EmptyText, EncoderError, ZeroNorm

HASHING = "deterministic_test_embedder"
REMOTE = "remote_endpoint"


@dataclass(frozen=True)
class EncoderHandle:
    encoder_id: str = "hashing-trigram-384"
    dim: int = 384
    backend: str = HASHING
    endpoint: str = ""
    batch_size: int = 64
    max_in_flight: int = 4
    ngram_sizes: tuple[int, ...] = (3,)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.backend not in (HASHING, REMOTE):
            raise ValueError(f"unknown encoder backend {self.backend!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderHandle":
        d = dict(d)
        if "ngram_sizes" in d:
            d["ngram_sizes"] = tuple(d["ngram_sizes"])
        return cls(**d)


@lru_cache(maxsize=1 << 18)
def _bucket(feature: str, dim: int) -> tuple[int, float]:
    h = int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest(), "big")
    return h % dim, (1.0 if (h >> 63) & 1 else -1.0)


class HashingEmbedder:
    """Signed feature hashing of character n-grams, L2-normalized.

    Text is lowercased and whitespace-collapsed, then padded with a space on
    both sides so word boundaries contribute their own n-grams.
    """

    def __init__(self, dim: int = 384, ngram_sizes: Sequence[int] = (3,)):
        self.dim = dim
        self.ngram_sizes = tuple(ngram_sizes)

    def embed(self, text: str) -> np.ndarray:
        norm = " ".join(text.lower().split())
        if not norm:
            raise EmptyText("cannot embed empty text")
        padded = f" {norm} "
        vec = np.zeros(self.dim)
        for n in self.ngram_sizes:
            for i in range(max(1, len(padded) - n + 1)):
                idx, sign = _bucket(padded[i:i + n], self.dim)
                vec[idx] += sign
        length = np.linalg.norm(vec)
        if length == 0.0:
            # every feature cancelled; fall back to an unsigned bucket so the vector is usable
            vec[_bucket(padded, self.dim)[0]] = 1.0
            length = 1.0
        return vec / length


class RemoteEncoder:
    """POST ``{"texts": [...]}`` and read ``{"embeddings": [[...], ...]}``."""

    def __init__(self, handle: EncoderHandle, cache: TraceCache | None = None,
                 client: httpx.Client | None = None, offline: bool = False):
        self.handle = handle
        self.cache = cache or NullCache()
        self.client = client or httpx.Client(timeout=120.0)
        self.offline = offline
        self._slots = threading.BoundedSemaphore(handle.max_in_flight)
        self.calls = 0

    @property
    def namespace(self) -> str:
        return f"embeddings-{self.handle.encoder_id}"

    def _key(self, text: str) -> str:
        return cache_key({"encoder_id": self.handle.encoder_id,
                          "text_sha256": hashlib.sha256(text.encode("utf-8")).hexdigest()})

    def _post(self, texts: list[str]) -> list[list[float]]:
        with self._slots:
            self.calls += 1
            try:
                resp = self.client.post(self.handle.endpoint, json={"texts": texts})
            except httpx.HTTPError as e:
                raise EncoderError(f"encoder request failed: {e}") from None
        if resp.status_code != 200:
            raise EncoderError(f"encoder returned status {resp.status_code}")
        try:
            embeddings = resp.json()["embeddings"]
        except (ValueError, KeyError, TypeError):
            raise EncoderError("malformed encoder response") from None
        if len(embeddings) != len(texts):
            raise EncoderError(f"expected {len(texts)} embeddings, got {len(embeddings)}")
        return embeddings

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        for t in texts:
            if not t.strip():
                raise EmptyText("cannot embed empty text")
        out: list[np.ndarray | None] = [None] * len(texts)
        missing = []
        for i, t in enumerate(texts):
            hit = self.cache.get(self.namespace, self._key(t))
            if hit is not None:
                out[i] = np.asarray(hit["embedding"], dtype=float)
            else:
                missing.append(i)
        if missing and self.offline:
            raise EncoderError("embedding cache miss while offline")
        bs = self.handle.batch_size
        for start in range(0, len(missing), bs):
            idx = missing[start:start + bs]
            batch = [texts[i] for i in idx]
            for i, emb in zip(idx, self._post(batch)):
                vec = np.asarray(emb, dtype=float)
                if vec.ndim != 1 or vec.shape[0] != self.handle.dim:
                    raise EncoderError(
                        f"dimension mismatch: expected {self.handle.dim}, got {vec.shape}")
                if not np.all(np.isfinite(vec)):
                    raise EncoderError("encoder returned non-finite values")
                self.cache.put(self.namespace, self._key(texts[i]),
                               {"encoder_id": self.handle.encoder_id, "embedding": vec.tolist()})
                out[i] = vec
        return out  # type: ignore[return-value]

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]


class Encoder:
    """Uniform front end over the hashing and remote backends."""

    def __init__(self, handle: EncoderHandle, cache: TraceCache | None = None,
                 client: httpx.Client | None = None, offline: bool = False):
        self.handle = handle
        if handle.backend == HASHING:
            self._impl = HashingEmbedder(handle.dim, handle.ngram_sizes)
            self._memo: dict[str, np.ndarray] = {}
        else:
            self._impl = RemoteEncoder(handle, cache, client, offline)
            self._memo = {}
        self._lock = threading.Lock()

    @property
    def encoder_id(self) -> str:
        return self.handle.encoder_id

    @property
    def dim(self) -> int:
        return self.handle.dim

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        with self._lock:
            todo = [t for t in dict.fromkeys(texts) if t not in self._memo]
        if todo:
            if isinstance(self._impl, HashingEmbedder):
                fresh = [self._impl.embed(t) for t in todo]
            else:
                fresh = self._impl.embed_many(todo)
            with self._lock:
                self._memo.update(zip(todo, fresh))
        return [self._memo[t].copy() for t in texts]


def embed_text(encoder: Encoder, text: str) -> np.ndarray:
    return encoder.embed(text)


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")


def denoise(trace_vec: np.ndarray, sequence_vec: np.ndarray, tolerance: float = 1e-9) -> np.ndarray:
    """Remove from ``trace_vec`` its component along ``sequence_vec``.

    If ``sequence_vec`` has norm below ``tolerance`` the trace vector is
    returned unchanged.
    """
    trace_vec = np.asarray(trace_vec, dtype=float)
    sequence_vec = np.asarray(sequence_vec, dtype=float)
    _check_dims(trace_vec, sequence_vec)
    sq = float(sequence_vec @ sequence_vec)
    if np.sqrt(sq) < tolerance:
        return trace_vec.copy()
    return trace_vec - (float(trace_vec @ sequence_vec) / sq) * sequence_vec


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_dims(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNorm("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def encode_denoised(encoder: Encoder, trace_texts: Sequence[str], sequence_text: str,
                    tolerance: float = 1e-9) -> list[np.ndarray]:
    """Embed each trace and strip the query sequence's own direction from it."""
    seq_vec = encoder.embed(sequence_text)
    return [denoise(v, seq_vec, tolerance) for v in encoder.embed_many(trace_texts)]
