"""Event-driven replay of a request trace over a single bottleneck link.

Requests, download completions, and periodic timers are processed in
timestamp order (ties: completions, then requests, then timers). Downloads are
sequential and non-preemptive; a miss enqueues a FIFO demand download, and a
request for a content already being fetched waits for that same completion
(counted as a miss with the residual latency). Prefetching obeys three rules:
never while a demand is in service or queued, at most one attempt per request
arrival (only if the link is idle at that instant), and at least K request
arrivals between consecutive prefetch starts.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import Counter, deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

from .arrival import WatchTimeStats, predict_arrival_window
from .cache import (CacheConfigError, HybridCache, PeriodicWholeCache, ReactivePolicy,
                    apply_prefetch_completion, select_prefetch, top_frequency_fill)
from .fusion import Predictors, predict_next
from .scoring import ScoreBoard
from .trace import Request, Trace

COMPLETION, REQUEST, TIMER = 0, 1, 2
WINDOW = 5000

REACTIVE_POLICIES = {"lru": ReactivePolicy.LRU, "lru2": ReactivePolicy.LRU2,
                     "lfu": ReactivePolicy.LFU}
BOARD_POLICIES = {"pec", "naive-pec"}
PERIODIC_POLICIES = {"periodic", "modified-periodic"}
ALL_POLICIES = set(REACTIVE_POLICIES) | BOARD_POLICIES | PERIODIC_POLICIES


@dataclass
class SimConfig:
    capacity: int
    policy: str = "pec"
    alpha: float = 0.5
    beta: float = 0.9
    gamma: float = 1.2
    K: int = 1
    update_period_s: float = 300.0
    transmission_time_s: float = 0.5
    topn: int = 10
    min_active_count: int = 3
    seed: int = 0
    periodic_period_s: float = 10800.0
    history_len: int = 64
    validate_board: bool = False

    def __post_init__(self):
        if self.policy not in ALL_POLICIES:
            raise CacheConfigError(f"unknown policy {self.policy!r}")
        if self.capacity < 0:
            raise CacheConfigError("capacity must be >= 0")
        if self.K < 1:
            raise CacheConfigError("prefetch gap K must be >= 1")
        if not 0.0 < self.alpha < self.beta < 1.0:
            raise CacheConfigError(
                f"need 0 < alpha < beta < 1, got {self.alpha}, {self.beta}")
        if self.transmission_time_s <= 0 or self.update_period_s <= 0:
            raise CacheConfigError("times must be positive")


@dataclass
class SimReport:
    policy: str
    requests: int
    hits: int
    misses: int
    hit_ratio: float
    hit_ratio_series: list[float]
    partial_window_requests: int
    partial_window_hit_ratio: Optional[float]
    total_latency: float
    cacheless_latency: float
    latency_reduction: float
    prefetch_count: int
    demand_count: int
    duplicate_waits: int
    link_busy_demand: float
    link_busy_prefetch: float
    wall_span: float
    utilization_demand: float
    utilization_prefetch: float
    config: dict
    event_log_path: Optional[str] = None

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)


@dataclass
class _Job:
    content: str
    kind: str                 # demand | prefetch
    start: float
    completion: float
    phase_start: float
    segments: list[tuple[str, float, float]] = field(default_factory=list)

    def reclassify_demand(self, t: float) -> None:
        self.segments.append((self.kind, self.phase_start, t))
        self.kind = "demand"
        self.phase_start = t

    def finish(self) -> list[tuple[str, float, float]]:
        self.segments.append((self.kind, self.phase_start, self.completion))
        return [(k, s, e) for k, s, e in self.segments if e > s]


def cacheless_replay(requests: Sequence[Request], transmission_time: float) -> float:
    """Total latency when every request goes through the same FIFO link with
    no cache: a request for a content still in flight waits for that
    completion, everything else downloads sequentially."""
    busy = 0.0
    pending: dict[str, float] = {}
    total = 0.0
    for r in requests:
        comp = pending.get(r.content_id, -math.inf)
        if comp > r.timestamp:
            total += comp - r.timestamp
        else:
            start = max(busy, r.timestamp)
            comp = start + transmission_time
            busy = comp
            pending[r.content_id] = comp
            total += comp - r.timestamp
    return total


def replay_latency_from_log(log: Sequence[tuple], transmission_time: float) -> float:
    """Independent re-derivation of total latency from the decision log:
    request outcomes plus prefetch start times are taken as given, all
    queueing arithmetic is recomputed."""
    busy = 0.0
    pending: dict[str, float] = {}
    total = 0.0
    for row in log:
        t, event = row[0], row[1]
        if event == "prefetch_start":
            if busy > t:
                raise AssertionError("logged prefetch started on a busy link")
            busy = t + transmission_time
            pending[row[2]] = busy
        elif event == "request":
            outcome = row[4]
            if outcome.startswith("hit"):
                continue
            content = row[2]
            comp = pending.get(content, -math.inf)
            if comp > t:
                total += comp - t
            else:
                start = max(busy, t)
                comp = start + transmission_time
                busy = comp
                pending[content] = comp
                total += comp - t
    return total


def hit_ratio_windows(outcomes: Sequence[bool], window: int = WINDOW
                      ) -> tuple[list[float], int, Optional[float]]:
    series = []
    for lo in range(0, len(outcomes) - window + 1, window):
        chunk = outcomes[lo:lo + window]
        series.append(sum(chunk) / window)
    rem = len(outcomes) % window
    partial = sum(outcomes[len(outcomes) - rem:]) / rem if rem else None
    return series, rem, partial


class Simulator:
    def __init__(self, trace: Trace, cfg: SimConfig,
                 predictors: Optional[Predictors] = None,
                 stats: Optional[WatchTimeStats] = None,
                 seed_histories: Optional[dict[str, list[tuple[str, float]]]] = None,
                 event_hook: Optional[Callable[[float], None]] = None):
        self.trace = trace
        self.cfg = cfg
        self.predictors = predictors
        self.stats = stats
        self.event_hook = event_hook
        self.uses_board = cfg.policy in BOARD_POLICIES
        if self.uses_board and (predictors is None or stats is None):
            raise CacheConfigError(f"policy {cfg.policy} needs predictors and watch stats")

        if cfg.policy == "periodic":
            self.cache = None
            self.whole = PeriodicWholeCache(cfg.capacity)
        else:
            hybrid = self.uses_board or cfg.policy == "modified-periodic"
            policy = REACTIVE_POLICIES.get(cfg.policy, ReactivePolicy.LRU2)
            self.cache = HybridCache(cfg.capacity, policy, cfg.alpha, cfg.beta,
                                     cfg.gamma, hybrid=hybrid)
            self.whole = None
        self.board = ScoreBoard(trace.catalog.keys()) if self.uses_board else None

        self.histories: dict[str, deque] = {}
        if seed_histories:
            for user, items in seed_histories.items():
                self.histories[user] = deque(items, maxlen=cfg.history_len)

        # trailing request window for the periodic baselines
        self.window_events: deque[tuple[float, str]] = deque()
        self.window_counts: Counter = Counter()

        self.log: list[tuple] = []
        self.outcomes: list[bool] = []
        self.total_latency = 0.0
        self.hits = self.misses = 0
        self.prefetch_count = self.demand_count = self.duplicate_waits = 0
        self.busy = {"demand": 0.0, "prefetch": 0.0}
        self.req_index = 0
        self.last_prefetch_req = -(10 ** 9)
        self.last_completion = 0.0

        self.job: Optional[_Job] = None
        self.queue: deque[str] = deque()
        self.waiters: dict[str, list[tuple[str, float]]] = {}

        self._events: list[tuple] = []
        self._seq = 0

    # -- event plumbing -------------------------------------------------------

    def _push(self, t: float, prio: int, kind: str, payload) -> None:
        self._seq += 1
        heapq.heappush(self._events, (t, prio, self._seq, kind, payload))

    def _link_idle(self) -> bool:
        return self.job is None

    def _start_next_demand(self, t: float) -> None:
        if self.job is None and self.queue:
            content = self.queue.popleft()
            T = self.cfg.transmission_time_s
            self.job = _Job(content, "demand", t, t + T, t)
            self._push(t + T, COMPLETION, "completion", content)
            self.log.append((t, "demand_start", content, "", "", ""))

    def _in_flight(self) -> set[str]:
        flight = set(self.waiters)
        if self.job is not None:
            flight.add(self.job.content)
        return flight

    # -- request processing ----------------------------------------------------

    def _lookup(self, content: str, t: float) -> str:
        if self.whole is not None:
            return "hit_proactive" if content in self.whole else "miss"
        return self.cache.on_request(content, t)

    def _on_request(self, r: Request, t: float) -> None:
        self.req_index += 1
        outcome = self._lookup(r.content_id, t)
        hit = outcome != "miss"
        if hit:
            self.hits += 1
        else:
            self.misses += 1
            if r.content_id in self.waiters:
                self.waiters[r.content_id].append((r.user_id, t))
                self.duplicate_waits += 1
                if (self.job is not None and self.job.kind == "prefetch"
                        and self.job.content == r.content_id):
                    self.job.reclassify_demand(t)
            else:
                self.waiters[r.content_id] = [(r.user_id, t)]
                self.demand_count += 1
                self.queue.append(r.content_id)
                self._start_next_demand(t)
        self.outcomes.append(hit)
        self.log.append((t, "request", r.content_id, r.user_id, outcome,
                         0.0 if hit else ""))

        if self.cfg.policy in PERIODIC_POLICIES:
            self._window_push(r.content_id, t)

        if self.uses_board:
            hist = self.histories.setdefault(r.user_id, deque(maxlen=self.cfg.history_len))
            hist.append((r.content_id, t))
            self.board.reset_user(r.user_id, t)
            pred = predict_next(list(hist), r, self.predictors, t)
            if not pred.is_empty:
                window = predict_arrival_window(self.stats, r.content_id, t)
                self.board.insert_prediction(pred.with_window(window), t)
            n_live = self.board.n_live(t)
            for portion, content in self.cache.adjust_partition(n_live, self._board_victim(t)):
                self.log.append((t, "evict", content, "", portion, "partition"))
            self._maybe_prefetch(t)
        elif self.cfg.policy == "modified-periodic":
            n_live = len(self.window_counts)
            for portion, content in self.cache.adjust_partition(n_live, self._freq_victim):
                self.log.append((t, "evict", content, "", portion, "partition"))

        if self.cache is not None:
            self.cache.assert_invariants()

    def _board_victim(self, t: float):
        def choose(contents: Sequence[str]) -> str:
            return self.board.min_key_among(contents, t)[0]
        return choose

    def _freq_victim(self, contents: Sequence[str]) -> str:
        return min(contents, key=lambda c: (self.window_counts.get(c, 0), c))

    def _maybe_prefetch(self, t: float) -> None:
        if not self._link_idle() or self.queue:
            return
        if self.req_index - self.last_prefetch_req < self.cfg.K:
            return
        found = select_prefetch(self.cache, self.board, t, self._in_flight())
        if found is None:
            return
        content, _key = found
        T = self.cfg.transmission_time_s
        self.job = _Job(content, "prefetch", t, t + T, t)
        self._push(t + T, COMPLETION, "completion", content)
        self.prefetch_count += 1
        self.last_prefetch_req = self.req_index
        self.log.append((t, "prefetch_start", content, "", "", ""))

    # -- completions and timers --------------------------------------------------

    def _on_completion(self, content: str, t: float) -> None:
        job = self.job
        assert job is not None and job.content == content
        self.job = None
        self.last_completion = t
        for kind, s, e in job.finish():
            self.busy[kind] += e - s
            self.log.append((e, "segment", content, "", kind, s))
        if job.kind == "demand":
            waiting = self.waiters.pop(content, [])
            for user, req_t in waiting:
                self.total_latency += t - req_t
                self.log.append((t, "served", content, user, "", t - req_t))
            if self.whole is None:
                for evicted in self.cache.insert_demand(content):
                    self.log.append((t, "evict", evicted, "", "reactive", "demand"))
                self.log.append((t, "insert", content, "", "reactive", ""))
            self.log.append((t, "demand_done", content, "", "", len(waiting)))
        else:
            outcome, evicted = apply_prefetch_completion(self.cache, self.board, content, t)
            if evicted is not None:
                self.log.append((t, "evict", evicted, "", "proactive", "prefetch"))
            if outcome == "inserted":
                self.log.append((t, "insert", content, "", "proactive", ""))
            self.log.append((t, "prefetch_done", content, "", outcome, ""))
        self._start_next_demand(t)
        if self.cache is not None:
            self.cache.assert_invariants()

    def _window_push(self, content: str, t: float) -> None:
        self.window_events.append((t, content))
        self.window_counts[content] += 1
        self._window_expire(t)

    def _window_expire(self, t: float) -> None:
        horizon = t - self.cfg.periodic_period_s
        while self.window_events and self.window_events[0][0] <= horizon:
            _, old = self.window_events.popleft()
            self.window_counts[old] -= 1
            if self.window_counts[old] == 0:
                del self.window_counts[old]

    def _on_timer(self, kind: str, t: float) -> None:
        if kind == "refresh":
            self.board.refresh(t)
            self.log.append((t, "refresh", "", "", "", ""))
        else:
            self._window_expire(t)
            if self.whole is not None:
                self.whole.fill(dict(self.window_counts))
                self.log.append((t, "fill", "", "", "whole", len(self.whole.contents)))
            else:
                for portion, content in top_frequency_fill(self.cache, dict(self.window_counts)):
                    self.log.append((t, "evict", content, "", portion, "fill"))
                self.log.append((t, "fill", "", "", "proactive", len(self.cache.proactive)))

    # -- main loop -----------------------------------------------------------------

    def run(self) -> SimReport:
        requests = self.trace.requests
        for r in requests:
            self._push(r.timestamp, REQUEST, "request", r)
        if requests:
            t0, t_end = requests[0].timestamp, requests[-1].timestamp
            if self.uses_board:
                t = t0 + self.cfg.update_period_s
                while t <= t_end:
                    self._push(t, TIMER, "refresh", None)
                    t += self.cfg.update_period_s
            if self.cfg.policy in PERIODIC_POLICIES:
                t = t0 + self.cfg.periodic_period_s
                while t <= t_end:
                    self._push(t, TIMER, "fill", None)
                    t += self.cfg.periodic_period_s

        while self._events:
            t, _prio, _seq, kind, payload = heapq.heappop(self._events)
            if kind == "completion":
                self._on_completion(payload, t)
            elif kind == "request":
                self._on_request(payload, t)
            else:
                self._on_timer(kind, t)
            if self.cfg.validate_board and self.board is not None:
                self.board.check_consistency(t)
            if self.event_hook is not None:
                self.event_hook(t)
        return self._report()

    def _report(self) -> SimReport:
        requests = self.trace.requests
        series, rem, partial = hit_ratio_windows(self.outcomes)
        cacheless = cacheless_replay(requests, self.cfg.transmission_time_s)
        if requests:
            span = max(self.last_completion, requests[-1].timestamp) - requests[0].timestamp
        else:
            span = 0.0
        reduction = 1.0 - self.total_latency / cacheless if cacheless > 0 else 0.0
        n = len(requests)
        return SimReport(
            policy=self.cfg.policy,
            requests=n,
            hits=self.hits,
            misses=self.misses,
            hit_ratio=self.hits / n if n else 0.0,
            hit_ratio_series=series,
            partial_window_requests=rem,
            partial_window_hit_ratio=partial,
            total_latency=self.total_latency,
            cacheless_latency=cacheless,
            latency_reduction=reduction,
            prefetch_count=self.prefetch_count,
            demand_count=self.demand_count,
            duplicate_waits=self.duplicate_waits,
            link_busy_demand=self.busy["demand"],
            link_busy_prefetch=self.busy["prefetch"],
            wall_span=span,
            utilization_demand=self.busy["demand"] / span if span > 0 else 0.0,
            utilization_prefetch=self.busy["prefetch"] / span if span > 0 else 0.0,
            config=asdict(self.cfg),
        )


def run_simulation(trace: Trace, cfg: SimConfig,
                   predictors: Optional[Predictors] = None,
                   stats: Optional[WatchTimeStats] = None,
                   seed_histories: Optional[dict] = None) -> tuple[SimReport, list[tuple]]:
    sim = Simulator(trace, cfg, predictors, stats, seed_histories)
    report = sim.run()
    return report, sim.log


def write_event_log(log: Sequence[tuple], path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "event", "content", "user", "portion", "value"])
        for row in log:
            writer.writerow(row)


def service_segments(log: Sequence[tuple]) -> list[tuple[float, float, str]]:
    """(start, end, kind) service intervals from the event log."""
    return sorted((row[5], row[0], row[4]) for row in log if row[1] == "segment")
