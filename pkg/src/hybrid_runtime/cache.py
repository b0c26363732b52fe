"""Bounded rolling buffer of captured graphs keyed by sequence length."""
from __future__ import annotations

import enum
import itertools
import threading
from dataclasses import dataclass
from typing import Callable

from .errors import KeyMismatch, WarmupExceedsCapacity
from .graph import ExecGraph

DEFAULT_CAPACITY = 600


class EvictionPolicy(str, enum.Enum):
    LEAST_USED = "least_used"  # min lifetime hit count, oldest insertion on ties
    LRU = "lru"  # min last-touch time; an insert counts as a touch


@dataclass
class _Entry:
    graph: ExecGraph
    use_count: int
    insert_seq: int
    last_touch: int


@dataclass(frozen=True)
class CacheStats:
    hits: int = 0
    misses: int = 0
    inserts: int = 0
    evictions: int = 0
    size: int = 0

    def __sub__(self, other: CacheStats) -> CacheStats:
        return CacheStats(
            hits=self.hits - other.hits,
            misses=self.misses - other.misses,
            inserts=self.inserts - other.inserts,
            evictions=self.evictions - other.evictions,
            size=self.size,
        )


class GraphCache:
    """Graphs keyed by length, evicting the least-used entry when full.

    Access is serialised by an internal lock, so a reader never observes a
    half-applied insert/evict.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY, policy: EvictionPolicy | str = EvictionPolicy.LEAST_USED):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.policy = EvictionPolicy(policy)
        self._entries: dict[int, _Entry] = {}
        self._seq = itertools.count()
        self._clock = itertools.count()
        self._lock = threading.RLock()
        self._hits = self._misses = self._inserts = self._evictions = 0
        self._in_session = False
        self._session_used: set[int] = set()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, length: int) -> bool:
        return length in self._entries

    def keys(self) -> list[int]:
        with self._lock:
            return sorted(self._entries)

    def use_count(self, length: int) -> int:
        return self._entries[length].use_count

    def lookup(self, length: int) -> ExecGraph | None:
        """Return the graph for ``length`` and count the hit, or ``None`` on a miss."""
        if length < 1:
            raise ValueError("length must be >= 1")
        with self._lock:
            entry = self._entries.get(length)
            if entry is None:
                self._misses += 1
                return None
            entry.use_count += 1
            entry.last_touch = next(self._clock)
            self._hits += 1
            self._session_used.add(length)
            return entry.graph

    def _victim(self) -> int:
        if self.policy is EvictionPolicy.LRU:
            return min(self._entries, key=lambda k: self._entries[k].last_touch)
        return min(self._entries, key=lambda k: (self._entries[k].use_count, self._entries[k].insert_seq))

    def insert(self, length: int, graph: ExecGraph) -> int | None:
        """Store ``graph``; returns the evicted length, if any.

        Re-inserting an existing length replaces the graph and resets its use
        count without evicting anything.
        """
        if graph.length != length:
            raise KeyMismatch(f"graph for length {graph.length} inserted under {length}")
        with self._lock:
            evicted = None
            if length not in self._entries and len(self._entries) >= self.capacity:
                evicted = self._victim()
                del self._entries[evicted]
                self._session_used.discard(evicted)
                self._evictions += 1
            self._entries[length] = _Entry(graph, 0, next(self._seq), next(self._clock))
            self._inserts += 1
            if self._in_session:
                self._session_used.add(length)
            return evicted

    def precapture_warmup(self, lo: int, hi: int, capture_fn: Callable[[int], ExecGraph]) -> int:
        """Capture and insert a graph for every length in ``[lo, hi]``."""
        if lo < 1 or lo > hi:
            raise ValueError(f"bad warm-up range [{lo}, {hi}]")
        count = hi - lo + 1
        if count > self.capacity:
            raise WarmupExceedsCapacity(f"{count} warm-up graphs exceed capacity {self.capacity}")
        for length in range(lo, hi + 1):
            self.insert(length, capture_fn(length))
        return count

    def begin_session(self) -> None:
        """Start tracking which entries a decode session uses."""
        with self._lock:
            self._in_session = True
            self._session_used.clear()

    def release_inactive(self) -> int:
        """Drop every entry neither hit nor inserted since the session began."""
        with self._lock:
            stale = [k for k in self._entries if k not in self._session_used]
            for k in stale:
                del self._entries[k]
            self._in_session = False
            self._session_used.clear()
            return len(stale)

    def stats(self) -> CacheStats:
        with self._lock:
            return CacheStats(self._hits, self._misses, self._inserts, self._evictions, len(self._entries))
