"""Content-addressed on-disk cache for provider responses and embeddings.

Layout: ``<root>/<namespace>/<first two hex chars of key>/<key>.json``.
Entries are published with a temp-file + rename so concurrent writers never
expose partial files and readers never need a lock.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .dataset import atomic_write_text


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def cache_key(inputs: dict) -> str:
    return hashlib.sha256(canonical_json(inputs).encode("utf-8")).hexdigest()


_UNSAFE = re.compile(r"[^A-Za-z0-9._-]+")


def _safe_namespace(name: str) -> str:
    cleaned = _UNSAFE.sub("_", name).strip("._")
    if not cleaned:
        raise ValueError(f"unusable cache namespace {name!r}")
    return cleaned


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    writes: int = 0

    def as_dict(self) -> dict[str, int]:
        return {"hits": self.hits, "misses": self.misses, "writes": self.writes}


class TraceCache:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.stats = CacheStats()
        self._lock = threading.Lock()

    def path_for(self, namespace: str, key: str) -> Path:
        return self.root / _safe_namespace(namespace) / key[:2] / f"{key}.json"

    def get(self, namespace: str, key: str) -> dict | None:
        path = self.path_for(namespace, key)
        try:
            with open(path, encoding="utf-8") as f:
                record = json.load(f)
        except FileNotFoundError:
            with self._lock:
                self.stats.misses += 1
            return None
        with self._lock:
            self.stats.hits += 1
        return record

    def put(self, namespace: str, key: str, record: dict) -> None:
        atomic_write_text(self.path_for(namespace, key), canonical_json(record) + "\n")
        with self._lock:
            self.stats.writes += 1

    def __contains__(self, item: tuple[str, str]) -> bool:
        namespace, key = item
        return self.path_for(namespace, key).exists()


class NullCache(TraceCache):
    """A cache that never stores anything; useful for one-off calls."""

    def __init__(self):
        super().__init__(os.devnull)

    def get(self, namespace: str, key: str) -> dict | None:
        with self._lock:
            self.stats.misses += 1
        return None

    def put(self, namespace: str, key: str, record: dict) -> None:
        pass

    def __contains__(self, item) -> bool:
        return False
