"""Top-n prediction assembly: min-max normalization, CombSum fusion of the
n-gram and self-attention models, and the TV next-episode heuristic.

Dispatch rule: a user whose latest request is a TV episode gets the single
next-episode prediction with weight 1; anything else goes through fusion of
the two sequence models. A content missing from one model's list contributes
0 from that model, so fused weights stay in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

from .ngram import NGramModel
from .trace import CatalogEntry, Kind, Request


@dataclass(frozen=True, slots=True)
class TopNPrediction:
    user_id: str
    items: tuple[tuple[str, float], ...]      # (content_id, weight), weight desc
    created_at: float
    window: Optional[tuple[float, float, float]] = None   # (a, b, mid)

    def __post_init__(self):
        weights = [w for _, w in self.items]
        if any(b > a for a, b in zip(weights, weights[1:])):
            raise ValueError("items must be sorted by weight descending")

    @property
    def is_empty(self) -> bool:
        return not self.items

    def with_window(self, window: tuple[float, float, float]) -> "TopNPrediction":
        return TopNPrediction(self.user_id, self.items, self.created_at, window)


def minmax_normalize(scores: dict[str, float]) -> dict[str, float]:
    if not scores:
        return {}
    lo, hi = min(scores.values()), max(scores.values())
    if hi == lo:
        return {c: 1.0 for c in scores}
    return {c: (s - lo) / (hi - lo) for c, s in scores.items()}


def fuse_topn(ngram_list: Sequence[tuple[str, float]],
              tsas_list: Sequence[tuple[str, float]],
              n_out: int) -> list[tuple[str, float]]:
    """CombSum: average of per-model min-max-normalized scores over the merged
    candidate set; absent-from-one-list scores count as 0."""
    sn = minmax_normalize(dict(ngram_list))
    st = minmax_normalize(dict(tsas_list))
    fused = {c: (sn.get(c, 0.0) + st.get(c, 0.0)) / 2.0 for c in sn.keys() | st.keys()}
    ranked = sorted(fused.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:n_out]


def tv_next_episode(request: Request, catalog: dict[str, CatalogEntry]) -> TopNPrediction:
    if request.kind is not Kind.TV_SERIES:
        raise ValueError(f"tv_next_episode got a {request.kind.value} request")
    entry = catalog.get(request.content_id)
    empty = TopNPrediction(request.user_id, (), request.timestamp)
    if entry is None or entry.series_id is None:
        return empty
    if entry.final_episode is not None and request.episode >= entry.final_episode:
        return empty
    nxt = _episode_content(catalog, entry.series_id, request.episode + 1)
    if nxt is None:
        return empty
    return TopNPrediction(request.user_id, ((nxt, 1.0),), request.timestamp)


def _episode_content(catalog: dict[str, CatalogEntry], series: str,
                     episode: int) -> Optional[str]:
    for cid, entry in catalog.items():
        if entry.series_id == series and entry.episode == episode:
            return cid
    return None


class SequenceScorer(Protocol):
    def topn(self, history: Sequence[tuple[str, float]], t_now: float,
             n_out: int) -> list[tuple[str, float]]: ...


@dataclass
class Predictors:
    """Everything predict_next needs: the trained models, the catalog for the
    TV heuristic, and the model vocabulary (active contents)."""
    ngram: Optional[NGramModel]
    tsas: Optional[SequenceScorer]
    catalog: dict[str, CatalogEntry]
    topn: int = 10
    episode_index: dict[tuple[str, int], str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.episode_index:
            for cid, entry in self.catalog.items():
                if entry.series_id is not None:
                    self.episode_index[(entry.series_id, entry.episode)] = cid

    @property
    def vocab(self) -> set[str]:
        return self.ngram.vocab if self.ngram is not None else set()

    def next_episode(self, request: Request) -> TopNPrediction:
        if request.kind is not Kind.TV_SERIES:
            raise ValueError(f"tv_next_episode got a {request.kind.value} request")
        entry = self.catalog.get(request.content_id)
        empty = TopNPrediction(request.user_id, (), request.timestamp)
        if entry is None or entry.series_id is None:
            return empty
        if entry.final_episode is not None and request.episode >= entry.final_episode:
            return empty
        nxt = self.episode_index.get((entry.series_id, request.episode + 1))
        if nxt is None:
            return empty
        return TopNPrediction(request.user_id, ((nxt, 1.0),), request.timestamp)


def predict_next(history: Sequence[tuple[str, float]], latest: Request,
                 predictors: Predictors, t_now: float) -> TopNPrediction:
    """Per-user next-content prediction at time t_now.

    `history` is the user's recent (content_id, timestamp) requests, newest
    last, and must already include the latest request.
    """
    if latest.kind is Kind.TV_SERIES:
        return predictors.next_episode(latest)

    vocab = predictors.vocab
    active_hist = [(c, t) for c, t in history if c in vocab]
    if not active_hist:
        return TopNPrediction(latest.user_id, (), t_now)

    n = predictors.topn
    ngram_list: list[tuple[str, float]] = []
    if predictors.ngram is not None:
        ngram_list = predictors.ngram.topn([c for c, _ in active_hist], n)
    if predictors.tsas is None:
        items = [(c, w) for c, w in minmax_items(ngram_list)][:n]
    else:
        tsas_list = predictors.tsas.topn(active_hist, t_now, n)
        items = fuse_topn(ngram_list, tsas_list, n)
    return TopNPrediction(latest.user_id, tuple(items), t_now)


def minmax_items(items: Sequence[tuple[str, float]]) -> list[tuple[str, float]]:
    """Min-max normalize a ranked list, keeping deterministic order."""
    norm = minmax_normalize(dict(items))
    return sorted(norm.items(), key=lambda kv: (-kv[1], kv[0]))
