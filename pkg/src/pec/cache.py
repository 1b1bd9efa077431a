"""Hybrid proactive/reactive cache and the classic reactive policies.

The cache is split into a proactive portion managed by predictive rank keys
(prefetch the best not-cached candidate, evict the worst cached one) and a
reactive portion managed by LRU / LRU-2 / LFU eviction scores. The partition
boundary moves one slot per request toward gamma times the number of contents
that currently hold a positive predictive score, clamped to [ceil(alpha*C),
floor(beta*C)]. Reactive capacity is whatever the proactive cap leaves free.

Eviction uses lazy min-heaps keyed by a per-policy proxy that orders exactly
like the policy score (LRU: last access, LRU-2: second-last access, LFU:
frequency), with ties broken toward evicting the smaller content id.
"""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

from .scoring import RankKey, ScoreBoard

TRACE_ORIGIN = 0.0


class ReactivePolicy(enum.Enum):
    LRU = "lru"
    LRU2 = "lru2"
    LFU = "lfu"


@dataclass
class ReactiveMeta:
    last_access: float
    second_last_access: float
    frequency: int

    def touch(self, t: float, frequency: int) -> None:
        self.second_last_access = self.last_access
        self.last_access = t
        self.frequency = frequency


def reactive_score(policy: ReactivePolicy, meta: ReactiveMeta, t: float) -> float:
    """Retention score (larger is kept). LRU: -(time since last access);
    LFU: frequency; LRU-2: inverse time since the second-last access, with the
    trace origin standing in when only one access is recorded."""
    if policy is ReactivePolicy.LRU:
        return -(t - meta.last_access)
    if policy is ReactivePolicy.LFU:
        return float(meta.frequency)
    gap = t - meta.second_last_access
    return math.inf if gap <= 0 else 1.0 / gap


def _proxy(policy: ReactivePolicy, meta: ReactiveMeta) -> float:
    # monotone in the reactive score at any fixed eviction time
    if policy is ReactivePolicy.LRU:
        return meta.last_access
    if policy is ReactivePolicy.LFU:
        return float(meta.frequency)
    return meta.second_last_access


class ReactivePortion:
    def __init__(self, policy: ReactivePolicy):
        self.policy = policy
        self.meta: dict[str, ReactiveMeta] = {}
        self._heap: list[tuple[float, str, int]] = []
        self._version: dict[str, int] = {}

    def __contains__(self, content: str) -> bool:
        return content in self.meta

    def __len__(self) -> int:
        return len(self.meta)

    def _push(self, content: str) -> None:
        v = self._version.get(content, 0) + 1
        self._version[content] = v
        heapq.heappush(self._heap, (_proxy(self.policy, self.meta[content]), content, v))

    def touch(self, content: str, t: float, frequency: int) -> None:
        self.meta[content].touch(t, frequency)
        self._push(content)

    def insert(self, content: str, meta: ReactiveMeta) -> None:
        self.meta[content] = meta
        self._push(content)

    def evict_min(self) -> str:
        """Remove and return the cached content with the lowest reactive score
        (ties evict the smaller content id)."""
        while self._heap:
            proxy, content, v = heapq.heappop(self._heap)
            if self._version.get(content) == v and content in self.meta:
                del self.meta[content]
                del self._version[content]
                return content
        raise RuntimeError("evict_min on empty reactive portion")


class CacheConfigError(ValueError):
    pass


class HybridCache:
    """Cache state shared by PEC and the reactive/periodic baselines.

    hybrid=False turns off the proactive portion entirely (pure reactive run).
    Contents being downloaded are not yet cached; the caller accumulates their
    access history through `note_pending_access` and commits at completion.
    """

    def __init__(self, capacity: int, policy: ReactivePolicy = ReactivePolicy.LRU2,
                 alpha: float = 0.5, beta: float = 0.9, gamma: float = 1.2,
                 hybrid: bool = True):
        if capacity < 0:
            raise CacheConfigError("capacity must be >= 0")
        self.capacity = capacity
        self.hybrid = hybrid
        self.alpha, self.beta, self.gamma = alpha, beta, gamma
        if hybrid:
            if not (0.0 < alpha < beta < 1.0):
                raise CacheConfigError(f"need 0 < alpha < beta < 1, got {alpha}, {beta}")
            if gamma <= 0:
                raise CacheConfigError("gamma must be positive")
            self.cap_lo = math.ceil(alpha * capacity)
            self.cap_hi = math.floor(beta * capacity)
            if self.cap_lo > self.cap_hi:
                raise CacheConfigError(
                    f"capacity {capacity} leaves no valid proactive cap in "
                    f"[ceil({alpha}*C), floor({beta}*C)]")
            self.proactive_cap = self.cap_lo
        else:
            self.cap_lo = self.cap_hi = self.proactive_cap = 0
        self.proactive: set[str] = set()
        self.reactive = ReactivePortion(policy)
        self.frequency: dict[str, int] = {}
        self._pending: dict[str, ReactiveMeta] = {}

    # -- invariants ----------------------------------------------------------

    @property
    def reactive_capacity(self) -> int:
        return self.capacity - self.proactive_cap

    def occupancy_ok(self) -> bool:
        if self.hybrid:
            partition_ok = (len(self.proactive) <= self.proactive_cap
                            and self.cap_lo <= self.proactive_cap <= self.cap_hi)
        else:
            partition_ok = not self.proactive
        return (partition_ok
                and len(self.proactive) + len(self.reactive) <= self.capacity
                and not (self.proactive & set(self.reactive.meta)))

    def assert_invariants(self) -> None:
        if not self.occupancy_ok():
            raise AssertionError(
                f"cache invariant violated: |P|={len(self.proactive)} "
                f"cap={self.proactive_cap} |R|={len(self.reactive)} C={self.capacity}")

    def __contains__(self, content: str) -> bool:
        return content in self.proactive or content in self.reactive

    # -- request path ----------------------------------------------------------

    def on_request(self, content: str, t: float) -> str:
        """Record one request: returns 'hit_proactive', 'hit_reactive' or 'miss'.
        Misses accumulate pending access history for the eventual insert."""
        freq = self.frequency.get(content, 0) + 1
        self.frequency[content] = freq
        if content in self.proactive:
            return "hit_proactive"
        if content in self.reactive:
            self.reactive.touch(content, t, freq)
            return "hit_reactive"
        pending = self._pending.get(content)
        if pending is None:
            self._pending[content] = ReactiveMeta(t, TRACE_ORIGIN, freq)
        else:
            pending.touch(t, freq)
        return "miss"

    def insert_demand(self, content: str) -> list[str]:
        """Commit a completed demand download into the reactive portion,
        evicting the lowest-score content if that portion is full. Returns
        evicted contents (empty when no eviction or no room at all)."""
        meta = self._pending.pop(content, None)
        if content in self:
            return []
        if meta is None:
            raise RuntimeError(f"insert_demand without pending access for {content}")
        evicted = []
        if self.reactive_capacity <= 0:
            return []
        if len(self.reactive) >= self.reactive_capacity:
            evicted.append(self.reactive.evict_min())
        self.reactive.insert(content, meta)
        return evicted

    def access_immediate(self, content: str, t: float) -> tuple[bool, Optional[str]]:
        """Classic trace-driven semantics: miss inserts immediately. Used for
        pure-policy simulation and oracle comparisons."""
        outcome = self.on_request(content, t)
        if outcome != "miss":
            return True, None
        meta = self._pending.pop(content)
        if self.reactive_capacity <= 0:
            return False, None
        evicted = None
        if len(self.reactive) >= self.reactive_capacity:
            evicted = self.reactive.evict_min()
        self.reactive.insert(content, meta)
        return False, evicted

    # -- proactive portion -----------------------------------------------------

    def add_proactive(self, content: str) -> None:
        if content in self:
            raise RuntimeError(f"{content} already cached")
        if len(self.proactive) >= self.proactive_cap:
            raise RuntimeError("proactive portion full")
        self.proactive.add(content)

    def evict_proactive(self, content: str) -> None:
        self.proactive.remove(content)

    def adjust_partition(self, n_live: int,
                         victim: Callable[[Sequence[str]], str]) -> list[tuple[str, str]]:
        """One-step move of the proactive cap toward gamma * n_live, clamped to
        the alpha/beta bounds. Shrinking below occupancy evicts the worst
        proactive contents immediately; growing may force a reactive eviction
        so total occupancy never exceeds capacity. Returns eviction events."""
        if not self.hybrid:
            return []
        target = self.gamma * n_live
        if self.proactive_cap < target:
            self.proactive_cap = min(self.proactive_cap + 1, self.cap_hi)
        elif self.proactive_cap > target:
            self.proactive_cap = max(self.proactive_cap - 1, self.cap_lo)
        events = []
        while len(self.proactive) > self.proactive_cap:
            loser = victim(sorted(self.proactive))
            self.proactive.remove(loser)
            events.append(("proactive", loser))
        while len(self.reactive) > self.reactive_capacity and len(self.reactive) > 0:
            events.append(("reactive", self.reactive.evict_min()))
        return events


def select_prefetch(cache: HybridCache, board: ScoreBoard, t: float,
                    in_flight: Iterable[str] = ()) -> Optional[tuple[str, RankKey]]:
    """Best positive-key content that is neither cached nor in flight; None if
    the proactive portion is full and the candidate does not strictly beat the
    current worst proactive content."""
    if cache.proactive_cap == 0:
        return None
    exclude = {board.content_ix[c] for c in cache.proactive}
    exclude.update(board.content_ix[c] for c in cache.reactive.meta)
    exclude.update(board.content_ix[c] for c in in_flight)
    cand = board.top_candidate(t, exclude)
    if cand is None:
        return None
    if len(cache.proactive) >= cache.proactive_cap:
        victim = board.min_key_among(sorted(cache.proactive), t)
        if victim is not None and not cand[1] > victim[1]:
            return None
    return cand


def apply_prefetch_completion(cache: HybridCache, board: ScoreBoard,
                              content: str, t: float) -> tuple[str, Optional[str]]:
    """Land a finished prefetch: dropped if the content got cached meanwhile or
    its key decayed to (0, 0); otherwise insert, evicting the worst proactive
    content when the portion is at cap. Returns (outcome, evicted)."""
    if content in cache:
        return "dropped", None
    if cache.proactive_cap == 0:
        return "dropped", None
    key = board.rank_key(content, t)
    if key <= (0.0, 0.0):
        return "dropped", None
    evicted = None
    if len(cache.proactive) >= cache.proactive_cap:
        victim = board.min_key_among(sorted(cache.proactive), t)
        evicted = victim[0]
        cache.evict_proactive(evicted)
    cache.add_proactive(content)
    return "inserted", evicted


class PeriodicWholeCache:
    """Whole-cache periodic proactive baseline: the cache is reloaded with the
    most frequent contents of the trailing window at each period boundary and
    never changes in between."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.contents: set[str] = set()

    def __contains__(self, content: str) -> bool:
        return content in self.contents

    def fill(self, counts: dict[str, int]) -> None:
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        self.contents = {c for c, _ in ranked[:self.capacity]}


def top_frequency_fill(cache: HybridCache, counts: dict[str, int]) -> list[tuple[str, str]]:
    """Modified-periodic boundary: refill the proactive portion with the most
    frequent trailing-window contents not already cached reactively."""
    ranked = [c for c, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
              if c not in cache.reactive]
    new = set(ranked[:cache.proactive_cap])
    events = [("proactive", c) for c in sorted(cache.proactive - new)]
    cache.proactive = new
    return events
