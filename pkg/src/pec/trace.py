"""Request traces: CSV ingestion, synthetic workload generation, filtering and splitting.

Timestamps are seconds (floats) relative to the trace origin (t=0). Traces are
kept sorted by timestamp, stable on ties.
"""

from __future__ import annotations

import csv
import enum
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np


class Kind(enum.Enum):
    TV_SERIES = "tv"
    MOVIE = "movie"
    SHOW = "show"
    OTHER = "other"


_KIND_BY_TOKEN = {k.value: k for k in Kind}


class TraceParseError(ValueError):
    """Raised for malformed trace CSV rows; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True, slots=True)
class Request:
    user_id: str
    content_id: str
    timestamp: float
    kind: Kind
    series_id: Optional[str] = None
    episode: Optional[int] = None

    def __post_init__(self):
        if not (math.isfinite(self.timestamp) and self.timestamp >= 0.0):
            raise ValueError(f"timestamp must be finite and >= 0, got {self.timestamp}")
        if (self.series_id is None) != (self.episode is None):
            raise ValueError("series_id and episode must both be present or both absent")
        if self.kind is Kind.TV_SERIES and self.episode is None:
            raise ValueError("tv requests need series_id and episode")
        if self.kind is not Kind.TV_SERIES and self.episode is not None:
            raise ValueError("episode info only valid for tv requests")


@dataclass(frozen=True, slots=True)
class CatalogEntry:
    kind: Kind
    series_id: Optional[str] = None
    episode: Optional[int] = None
    final_episode: Optional[int] = None


@dataclass
class Trace:
    requests: list[Request]
    catalog: dict[str, CatalogEntry]

    def __post_init__(self):
        ts = [r.timestamp for r in self.requests]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError("requests must be sorted by timestamp")
        missing = {r.content_id for r in self.requests} - self.catalog.keys()
        if missing:
            raise ValueError(f"contents missing from catalog: {sorted(missing)[:5]}")

    def __len__(self) -> int:
        return len(self.requests)

    @property
    def span(self) -> tuple[float, float]:
        if not self.requests:
            return (0.0, 0.0)
        return (self.requests[0].timestamp, self.requests[-1].timestamp)

    def split_at(self, t: float) -> tuple["Trace", "Trace"]:
        """Split at a timestamp boundary: requests with timestamp < t go to the
        first trace, the rest to the second. Catalog is shared."""
        head = [r for r in self.requests if r.timestamp < t]
        tail = [r for r in self.requests if r.timestamp >= t]
        return Trace(head, self.catalog), Trace(tail, self.catalog)

    def split_fraction(self, frac: float) -> tuple["Trace", "Trace"]:
        """Split so that roughly `frac` of requests land in the first trace,
        cutting at the timestamp of the request at that quantile."""
        if not self.requests:
            return Trace([], self.catalog), Trace([], self.catalog)
        k = int(len(self.requests) * frac)
        k = min(max(k, 0), len(self.requests) - 1)
        return self.split_at(self.requests[k].timestamp)

    def user_sequences(self) -> dict[str, list[Request]]:
        seqs: dict[str, list[Request]] = {}
        for r in self.requests:
            seqs.setdefault(r.user_id, []).append(r)
        return seqs


def _parse_row(line_no: int, row: Sequence[str]) -> Request:
    if len(row) != 6:
        raise TraceParseError(line_no, f"expected 6 fields, got {len(row)}")
    user_id, content_id, ts_s, kind_s, series_s, ep_s = (f.strip() for f in row)
    if not user_id or not content_id:
        raise TraceParseError(line_no, "empty user_id or content_id")
    try:
        ts = float(ts_s)
    except ValueError:
        raise TraceParseError(line_no, f"bad timestamp {ts_s!r}") from None
    kind = _KIND_BY_TOKEN.get(kind_s.lower())
    if kind is None:
        raise TraceParseError(line_no, f"unknown kind {kind_s!r}")
    series = series_s or None
    episode: Optional[int] = None
    if ep_s:
        try:
            episode = int(ep_s)
        except ValueError:
            raise TraceParseError(line_no, f"bad episode {ep_s!r}") from None
        if episode <= 0:
            raise TraceParseError(line_no, f"episode must be positive, got {episode}")
    try:
        return Request(user_id, content_id, ts, kind, series, episode)
    except ValueError as exc:
        raise TraceParseError(line_no, str(exc)) from None


def parse_trace(path) -> Trace:
    """Load a `user_id,content_id,timestamp,kind,series_id,episode` CSV.

    Input rows need not be time-ordered; the result is stably sorted. The
    catalog is rebuilt from observed fields, with final_episode inferred as
    the max observed episode per series.
    """
    requests: list[Request] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, start=1):
            if line_no == 1:
                continue  # header
            if not row:
                continue
            requests.append(_parse_row(line_no, row))
    requests.sort(key=lambda r: r.timestamp)  # sort() is stable: ties keep input order
    return Trace(requests, build_catalog(requests))


def build_catalog(requests: Iterable[Request]) -> dict[str, CatalogEntry]:
    max_ep: dict[str, int] = {}
    seen: dict[str, Request] = {}
    for r in requests:
        if r.content_id not in seen:
            seen[r.content_id] = r
        if r.series_id is not None:
            max_ep[r.series_id] = max(max_ep.get(r.series_id, 0), r.episode)
    catalog = {}
    for cid, r in seen.items():
        final = max_ep.get(r.series_id) if r.series_id is not None else None
        catalog[cid] = CatalogEntry(r.kind, r.series_id, r.episode, final)
    return catalog


def write_trace(trace: Trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "content_id", "timestamp", "kind", "series_id", "episode"])
        for r in trace.requests:
            writer.writerow([
                r.user_id,
                r.content_id,
                f"{r.timestamp:.6f}",
                r.kind.value,
                r.series_id or "",
                r.episode if r.episode is not None else "",
            ])


def filter_active(trace: Trace, min_count: int) -> tuple[set[str], set[str]]:
    """Users and contents with at least min_count requests in `trace`."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    users = Counter(r.user_id for r in trace.requests)
    contents = Counter(r.content_id for r in trace.requests)
    return (
        {u for u, c in users.items() if c >= min_count},
        {c for c, n in contents.items() if n >= min_count},
    )


# ---------------------------------------------------------------------------
# Synthetic workload with planted, recoverable structure
# ---------------------------------------------------------------------------

DEFAULT_WATCH_MEAN = {"tv": 1200.0, "movie": 4800.0, "show": 900.0, "other": 600.0}
DEFAULT_WATCH_STD = {"tv": 240.0, "movie": 900.0, "show": 240.0, "other": 180.0}


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int = 0
    n_users: int = 100
    n_series: int = 20
    episodes_per_series: int = 24
    n_movies: int = 200
    tv_fraction: float = 0.5
    p_follow: float = 0.8
    zipf_s: float = 0.8
    markov_order: int = 1
    markov_fanout: int = 8
    session_length_mean: float = 6.0
    off_mean: float = 14400.0
    watch_time_mean: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_WATCH_MEAN))
    watch_time_std: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_WATCH_STD))
    duration: float = 7 * 86400.0

    def __post_init__(self):
        for name in ("tv_fraction", "p_follow"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {v}")
        for name in ("n_users",):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("n_series", "episodes_per_series", "n_movies", "markov_fanout"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.markov_order not in (1, 2):
            raise ValueError("markov_order must be 1 or 2")
        if self.session_length_mean < 1.0:
            raise ValueError("session_length_mean must be >= 1")
        if self.duration <= 0 or self.off_mean <= 0:
            raise ValueError("duration and off_mean must be positive")
        for table in (self.watch_time_mean, self.watch_time_std):
            extra = set(table) - {k.value for k in Kind}
            if extra:
                raise ValueError(f"unknown kinds in watch time table: {sorted(extra)}")


def movie_id(i: int) -> str:
    return f"m{i:05d}"


def episode_id(series: int, ep: int) -> str:
    return f"s{series:04d}e{ep:04d}"


def series_id(series: int) -> str:
    return f"s{series:04d}"


class PlantedMarkov:
    """Ground-truth next-movie transition used by the generator.

    Each movie (or movie pair, for order 2) has a fixed successor set of size
    `markov_fanout`; the next movie is the global Zipf popularity distribution
    restricted and renormalized to that set. Row probabilities are exposed so
    tests can compute oracle accuracies directly from the planted structure.
    """

    def __init__(self, cfg: SyntheticConfig):
        self.order = cfg.markov_order
        self.n_movies = cfg.n_movies
        self.fanout = min(cfg.markov_fanout, cfg.n_movies)
        weights = np.arange(1, cfg.n_movies + 1, dtype=float) ** (-cfg.zipf_s)
        self.zipf = weights / weights.sum()
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0x5EED])))
        self._succ1 = np.empty((cfg.n_movies, self.fanout), dtype=np.int64)
        for i in range(cfg.n_movies):
            self._succ1[i] = rng.choice(cfg.n_movies, size=self.fanout, replace=False)
        # order-2 successor sets are derived from seeded mixing constants so the
        # full pair table never needs materializing
        self._mix = tuple(int(x) for x in rng.integers(1, cfg.n_movies, size=3))

    def successors(self, context: tuple[int, ...]) -> np.ndarray:
        if self.order == 1 or len(context) == 1:
            return self._succ1[context[-1]]
        i, j = context[-2], context[-1]
        a, b, c = self._mix
        row = (a * i + b * j + c) % self.n_movies
        return self._succ1[row]

    def row(self, context: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        """(successor movie indices, transition probabilities) for a context."""
        succ = self.successors(context)
        w = self.zipf[succ]
        return succ, w / w.sum()

    def top1(self, context: tuple[int, ...]) -> tuple[int, float]:
        """Most likely next movie and its probability; ties go to the smaller index."""
        succ, p = self.row(context)
        order = np.lexsort((succ, -p))
        k = order[0]
        return int(succ[k]), float(p[k])

    def sample(self, context: tuple[int, ...], rng: np.random.Generator) -> int:
        succ, p = self.row(context)
        return int(rng.choice(succ, p=p))

    def sample_marginal(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.n_movies, p=self.zipf))


@dataclass(frozen=True, slots=True)
class _Event:
    user: int
    t: float
    content: str
    kind: Kind
    series: Optional[str]
    episode: Optional[int]
    session: int


def synthetic_catalog(cfg: SyntheticConfig) -> dict[str, CatalogEntry]:
    catalog: dict[str, CatalogEntry] = {}
    for s in range(cfg.n_series):
        for ep in range(1, cfg.episodes_per_series + 1):
            catalog[episode_id(s, ep)] = CatalogEntry(
                Kind.TV_SERIES, series_id(s), ep, cfg.episodes_per_series
            )
    for m in range(cfg.n_movies):
        catalog[movie_id(m)] = CatalogEntry(Kind.MOVIE)
    return catalog


def _user_events(cfg: SyntheticConfig, user: int, markov: PlantedMarkov,
                 seed: np.random.SeedSequence) -> list[_Event]:
    rng = np.random.Generator(np.random.PCG64(seed))
    mean = {**DEFAULT_WATCH_MEAN, **cfg.watch_time_mean}
    std = {**DEFAULT_WATCH_STD, **cfg.watch_time_std}

    events: list[_Event] = []
    t = rng.exponential(cfg.off_mean)
    session = 0
    prev_tv: Optional[tuple[int, int]] = None   # (series, episode) of previous request
    movie_ctx: list[int] = []                   # immediately-preceding run of movies

    def fresh_draw() -> tuple[str, Kind, Optional[str], Optional[int]]:
        nonlocal prev_tv, movie_ctx
        if rng.random() < cfg.tv_fraction:
            s = int(rng.integers(cfg.n_series))
            prev_tv, movie_ctx = (s, 1), []
            return episode_id(s, 1), Kind.TV_SERIES, series_id(s), 1
        if len(movie_ctx) >= markov.order:
            m = markov.sample(tuple(movie_ctx[-markov.order:]), rng)
        else:
            m = markov.sample_marginal(rng)
        prev_tv = None
        movie_ctx = (movie_ctx + [m])[-2:]
        return movie_id(m), Kind.MOVIE, None, None

    while t <= cfg.duration:
        n_req = int(rng.geometric(1.0 / cfg.session_length_mean))
        for _ in range(n_req):
            if t > cfg.duration:
                break
            if (prev_tv is not None and prev_tv[1] < cfg.episodes_per_series
                    and rng.random() < cfg.p_follow):
                s, ep = prev_tv[0], prev_tv[1] + 1
                prev_tv = (s, ep)
                movie_ctx = []
                content, kind, sid, epi = episode_id(s, ep), Kind.TV_SERIES, series_id(s), ep
            else:
                content, kind, sid, epi = fresh_draw()
            events.append(_Event(user, t, content, kind, sid, epi, session))
            watch_kind = kind.value
            t += max(1.0, rng.normal(mean[watch_kind], std[watch_kind]))
        t += rng.exponential(cfg.off_mean)
        session += 1
    return events


def generate_synthetic_events(cfg: SyntheticConfig) -> list[_Event]:
    """All per-user events with session ids, merged and time-sorted.

    Exposed separately from generate_synthetic_trace so tests can inspect
    session structure (within-session pairs, continuation rates).
    """
    markov = PlantedMarkov(cfg)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_users)
    events: list[_Event] = []
    for u in range(cfg.n_users):
        events.extend(_user_events(cfg, u, markov, seeds[u]))
    events.sort(key=lambda e: e.t)  # stable; ties keep per-user emission order
    return events


def generate_synthetic_trace(cfg: SyntheticConfig) -> Trace:
    """Deterministic on-off workload with planted TV-continuation and movie
    transition structure; the full planted catalog is attached."""
    events = generate_synthetic_events(cfg)
    requests = [
        Request(f"u{e.user:05d}", e.content, e.t, e.kind, e.series, e.episode)
        for e in events
    ]
    return Trace(requests, synthetic_catalog(cfg))
