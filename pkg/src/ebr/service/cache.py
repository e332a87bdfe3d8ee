"""Query-embedding cache: LRU eviction at capacity, TTL expiry on read.

Keys combine the normalized query with the serving model_id so a
checkpoint swap can never serve stale vectors. Ages come from a monotonic
clock (injectable for tests) so wall-clock adjustments cannot resurrect
expired entries. All operations take the internal lock and are safe for
concurrent request handlers.
"""

from __future__ import annotations

import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class CacheConfig:
    capacity: int = 10000
    ttl_seconds: float = 3600.0

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("cache capacity must be >= 1")
        if self.ttl_seconds < 1:
            raise ValueError("cache ttl_seconds must be >= 1")


class EmbeddingCache:
    def __init__(self, config: CacheConfig, clock: Callable[[], float] = time.monotonic):
        self.config = config
        self._clock = clock
        self._entries: OrderedDict[str, tuple[float, np.ndarray]] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(query: str, model_id: str) -> str:
        return f"{model_id}|{query}"

    def get(self, key: str) -> np.ndarray | None:
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None:
                inserted_at, vector = entry
                if self._clock() - inserted_at < self.config.ttl_seconds:
                    self._entries.move_to_end(key)
                    self.hits += 1
                    return vector
                del self._entries[key]
            self.misses += 1
            return None

    def put(self, key: str, vector: np.ndarray) -> None:
        with self._lock:
            if key in self._entries:
                del self._entries[key]
            self._entries[key] = (self._clock(), vector)
            while len(self._entries) > self.config.capacity:
                self._entries.popitem(last=False)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def stats(self) -> dict:
        with self._lock:
            return {"hits": self.hits, "misses": self.misses, "size": len(self._entries)}
