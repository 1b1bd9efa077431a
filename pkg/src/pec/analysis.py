"""Offline diagnostics: predictive-score vs LRU-2 recall by popularity band,
and next-content prediction accuracy (per model, fused, and the union upper
bound)."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .arrival import WatchTimeStats, predict_arrival_window
from .fusion import Predictors, fuse_topn, predict_next
from .scoring import ScoreBoard
from .trace import Kind, Trace

BANDS = ((1, 10), (11, 50), (51, 100), (101, 200), (201, 500))


def popularity_ranks(trace: Trace) -> dict[str, int]:
    """1-based request-count rank over the whole trace (ties by content id)."""
    counts: dict[str, int] = {}
    for r in trace.requests:
        counts[r.content_id] = counts.get(r.content_id, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return {c: i + 1 for i, (c, _) in enumerate(ranked)}


def band_of(rank: int) -> Optional[tuple[int, int]]:
    for lo, hi in BANDS:
        if lo <= rank <= hi:
            return (lo, hi)
    return None


class GlobalLru2:
    """Per-content last two access times over the full request stream,
    independent of any cache state; single-access contents fall back to the
    trace origin for their second-last access."""

    def __init__(self):
        self.last: dict[str, tuple[float, float]] = {}

    def touch(self, content: str, t: float) -> None:
        prev = self.last.get(content)
        self.last[content] = (t, prev[0] if prev else 0.0)

    def top(self, t: float, k: int) -> list[str]:
        items = sorted(
            self.last.items(),
            key=lambda kv: (-(1.0 / (t - kv[1][1])) if t > kv[1][1] else -np.inf, kv[0]),
        )
        return [c for c, _ in items[:k]]


@dataclass
class Snapshot:
    t: float
    predictive: list[str]
    lru2: list[str]


def collect_snapshots(test_trace: Trace, predictors: Predictors,
                      stats: WatchTimeStats, period: float = 1800.0,
                      list_size: int = 2000,
                      seed_histories: Optional[dict] = None,
                      history_len: int = 64) -> list[Snapshot]:
    """Replay the trace maintaining the predictive score board and global LRU-2
    state; capture both top lists at each period boundary."""
    board = ScoreBoard(test_trace.catalog.keys())
    lru2 = GlobalLru2()
    histories: dict[str, deque] = {}
    if seed_histories:
        for user, items in seed_histories.items():
            histories[user] = deque(items, maxlen=history_len)
    snapshots: list[Snapshot] = []
    if not test_trace.requests:
        return snapshots
    next_boundary = test_trace.requests[0].timestamp + period
    for r in test_trace.requests:
        while r.timestamp >= next_boundary:
            snapshots.append(_snapshot(board, lru2, next_boundary, list_size))
            next_boundary += period
        lru2.touch(r.content_id, r.timestamp)
        hist = histories.setdefault(r.user_id, deque(maxlen=history_len))
        hist.append((r.content_id, r.timestamp))
        board.reset_user(r.user_id, r.timestamp)
        pred = predict_next(list(hist), r, predictors, r.timestamp)
        if not pred.is_empty:
            window = predict_arrival_window(stats, r.content_id, r.timestamp)
            board.insert_prediction(pred.with_window(window), r.timestamp)
    return snapshots


def _snapshot(board: ScoreBoard, lru2: GlobalLru2, t: float, k: int) -> Snapshot:
    uniq, p1, p2 = board.scores(t)
    live = (p1 > 0.0) | (p2 > 0.0)
    order = np.lexsort((uniq[live], -p2[live], -p1[live]))[:k]
    predictive = [board.content_ids[int(ix)] for ix in uniq[live][order]]
    return Snapshot(t, predictive, lru2.top(t, k))


def recall_by_popularity(snapshots: Sequence[Snapshot], test_trace: Trace,
                         ranks: dict[str, int], window: float = 1800.0
                         ) -> list[dict]:
    """Micro-averaged recall per popularity band: the fraction of distinct
    contents requested within `window` after each snapshot that appear in the
    snapshot's predictive / LRU-2 top lists."""
    requested: dict[int, set[str]] = {i: set() for i in range(len(snapshots))}
    times = [s.t for s in snapshots]
    for r in test_trace.requests:
        for i, t in enumerate(times):
            if t <= r.timestamp < t + window:
                requested[i].add(r.content_id)
    num = {b: [0, 0] for b in BANDS}
    den = {b: 0 for b in BANDS}
    for i, snap in enumerate(snapshots):
        pred, lru = set(snap.predictive), set(snap.lru2)
        for content in requested[i]:
            band = band_of(ranks.get(content, 10 ** 9))
            if band is None:
                continue
            den[band] += 1
            num[band][0] += content in pred
            num[band][1] += content in lru
    rows = []
    for band in BANDS:
        d = den[band]
        rows.append({
            "band": f"top {band[0]}-{band[1]}",
            "n": d,
            "predictive_recall": num[band][0] / d if d else 0.0,
            "lru2_recall": num[band][1] / d if d else 0.0,
        })
    return rows


# ---------------------------------------------------------------------------
# Prediction accuracy / fusion upper bound
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    n_values: tuple[int, ...]
    fusion_samples: int = 0
    tv_samples: int = 0
    tv_hits: int = 0
    hits: dict = field(default_factory=dict)   # model -> {n: hit count}

    @property
    def tv_accuracy(self) -> float:
        return self.tv_hits / self.tv_samples if self.tv_samples else 0.0

    def hit_ratio(self, model: str, n: int) -> float:
        if not self.fusion_samples:
            return 0.0
        return self.hits[model][n] / self.fusion_samples

    def to_rows(self) -> list[dict]:
        rows = []
        for n in self.n_values:
            rows.append({"n": n, **{m: self.hit_ratio(m, n) for m in self.hits}})
        return rows


def evaluate_predictions(test_trace: Trace, predictors: Predictors,
                         n_values: tuple[int, ...] = (1, 3, 10),
                         seed_histories: Optional[dict] = None,
                         history_len: int = 64,
                         max_samples: Optional[int] = None,
                         collect_lists: bool = False):
    """Walk consecutive same-user request pairs of the test trace: TV-latest
    pairs score the next-episode heuristic, the rest score the two models,
    their fusion, and the union-of-lists upper bound at each n."""
    result = EvalResult(n_values, hits={m: {n: 0 for n in n_values}
                                        for m in ("ngram", "tsas", "fused", "upper")})
    listed: list[dict] = []
    histories: dict[str, deque] = {}
    if seed_histories:
        for user, items in seed_histories.items():
            histories[user] = deque(items, maxlen=history_len)
    vocab = predictors.vocab
    n_max = max(n_values)
    pending: dict[str, tuple] = {}   # user -> (kind of dispatch, payload, truth slot)
    for r in test_trace.requests:
        last = pending.pop(r.user_id, None)
        if last is not None:
            _score_pair(last, r.content_id, result, listed if collect_lists else None,
                        n_values)
        hist = histories.setdefault(r.user_id, deque(maxlen=history_len))
        hist.append((r.content_id, r.timestamp))
        if max_samples is not None and result.fusion_samples + result.tv_samples >= max_samples:
            continue
        if r.kind is Kind.TV_SERIES:
            pred = predictors.next_episode(r)
            if not pred.is_empty:
                pending[r.user_id] = ("tv", pred.items[0][0])
        else:
            active_hist = [(c, t) for c, t in hist if c in vocab]
            if not active_hist:
                continue
            ngram_list = predictors.ngram.topn([c for c, _ in active_hist], n_max)
            tsas_list = (predictors.tsas.topn(active_hist, r.timestamp, n_max)
                         if predictors.tsas is not None else [])
            pending[r.user_id] = ("fusion", (ngram_list, tsas_list))
    return (result, listed) if collect_lists else result


def _score_pair(last, truth: str, result: EvalResult, listed, n_values) -> None:
    kind, payload = last
    if kind == "tv":
        result.tv_samples += 1
        result.tv_hits += payload == truth
        return
    ngram_list, tsas_list = payload
    result.fusion_samples += 1
    fused = fuse_topn(ngram_list, tsas_list, max(n_values))
    for n in n_values:
        ng = [c for c, _ in ngram_list[:n]]
        ts = [c for c, _ in tsas_list[:n]]
        fu = [c for c, _ in fuse_topn(ngram_list[:n], tsas_list[:n], n)]
        result.hits["ngram"][n] += truth in ng
        result.hits["tsas"][n] += truth in ts
        result.hits["fused"][n] += truth in fu
        result.hits["upper"][n] += truth in set(ng) | set(ts)
    if listed is not None:
        listed.append({"ngram": ngram_list, "tsas": tsas_list, "fused": fused,
                       "truth": truth})


def write_recall_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["band", "n", "predictive_recall",
                                                "lru2_recall"])
        writer.writeheader()
        writer.writerows(rows)


def write_accuracy_csv(result: EvalResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["n", "ngram", "tsas", "fused", "upper"])
        writer.writeheader()
        writer.writerows(result.to_rows())
