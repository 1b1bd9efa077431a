"""Time-sensitive predictive caching scores.

Each live per-user prediction contributes a time-varying score to every
content in its top-n list; the board aggregates these into the primary score
P1 (weighted sum over open windows) and the secondary score P2 (inverse gap to
the nearest still-ahead window). Aggregates are evaluated lazily at query
time, always summing in canonical (content, user) order so that incremental
bookkeeping and a from-scratch recomputation agree bit-for-bit.
"""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .fusion import TopNPrediction

P2_CAP = 1e9
_MIN_GAP = 1.0 / P2_CAP

Window = tuple[float, float, float]   # (a, b, mid)
RankKey = tuple[float, float]


def user_score(window: Window, t: float) -> float:
    """Per-user predictive score: 0 before the window, the posterior density
    (b-a)/(b-t) on [a, mid), a flat 2 on [mid, b], 0 after."""
    a, b, mid = window
    if t < a or t > b:
        return 0.0
    if t >= mid:
        return 2.0
    return (b - a) / (b - t)


def score_vector(a: np.ndarray, mid: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    denom = b - t
    ramp = (b - a) / np.where(denom > 0.0, denom, 1.0)
    return np.select([t < a, t < mid, t <= b], [0.0, ramp, 2.0], default=0.0)


@dataclass
class UserPredictionState:
    user_id: str
    items: tuple[tuple[str, float], ...]
    window: Window
    issued_at: float
    gen: int
    slots: list[int]
    expired: bool = False


class ScoreBoard:
    """Aggregated predictive scores over all users' live predictions.

    One live prediction per user; a new prediction replaces the old one. The
    count of currently positive-score contents (n_live) is maintained
    incrementally through an expiry heap so per-request partition adjustment
    stays O(changes).
    """

    def __init__(self, content_ids: Iterable[str]):
        self.content_ids = sorted(set(content_ids))
        self.content_ix = {c: i for i, c in enumerate(self.content_ids)}
        self.user_states: dict[str, UserPredictionState] = {}
        self._user_ord: dict[str, int] = {}
        self._gen: dict[str, int] = {}
        self.last_refresh: float = float("-inf")
        self._now = float("-inf")

        cap = 1024
        self._s_content = np.zeros(cap, dtype=np.int64)
        self._s_user = np.zeros(cap, dtype=np.int64)
        self._s_w = np.zeros(cap, dtype=np.float64)
        self._s_a = np.zeros(cap, dtype=np.float64)
        self._s_mid = np.zeros(cap, dtype=np.float64)
        self._s_b = np.zeros(cap, dtype=np.float64)
        self._in_use = np.zeros(cap, dtype=bool)
        self._free: list[int] = list(range(cap - 1, -1, -1))

        self._dirty = True
        self._view: Optional[dict] = None

        # (time, flag, gen, user, content_ix); flag 1 entries die at t >= time,
        # flag 0 entries at t > time
        self._expiry: list[tuple[float, int, int, str, int]] = []
        self._potent: dict[int, int] = {}
        self._n_live = 0

    # -- slot bookkeeping ---------------------------------------------------

    def _grow(self) -> None:
        old = len(self._in_use)
        new = old * 2
        for name in ("_s_content", "_s_user", "_s_w", "_s_a", "_s_mid", "_s_b", "_in_use"):
            arr = getattr(self, name)
            grown = np.zeros(new, dtype=arr.dtype)
            grown[:old] = arr
            setattr(self, name, grown)
        self._free.extend(range(new - 1, old - 1, -1))

    def _alloc(self) -> int:
        if not self._free:
            self._grow()
        slot = self._free.pop()
        self._in_use[slot] = True
        return slot

    def _release(self, slot: int) -> None:
        self._in_use[slot] = False
        self._free.append(slot)

    # -- potency / n_live ---------------------------------------------------

    def _advance(self, t: float) -> None:
        if t < self._now:
            raise ValueError(f"time went backwards: {t} < {self._now}")
        self._now = t
        heap = self._expiry
        while heap and (heap[0][0] < t or (heap[0][0] == t and heap[0][1] == 1)):
            _, _, gen, user, cix = heapq.heappop(heap)
            if self._gen.get(user) == gen:
                self._drop_potent(cix)

    def _drop_potent(self, cix: int) -> None:
        n = self._potent[cix] - 1
        if n == 0:
            del self._potent[cix]
            self._n_live -= 1
        else:
            self._potent[cix] = n

    def _add_potent(self, cix: int) -> None:
        n = self._potent.get(cix, 0)
        if n == 0:
            self._n_live += 1
        self._potent[cix] = n + 1

    @staticmethod
    def _potent_at(w: float, window: Window, t: float) -> bool:
        a, b, _ = window
        return (t <= b) if w > 0.0 else (t < a)

    def n_live(self, t: float) -> int:
        self._advance(t)
        return self._n_live

    # -- mutation -----------------------------------------------------------

    def insert_prediction(self, prediction: TopNPrediction, t: float) -> None:
        if prediction.window is None:
            raise ValueError("prediction must carry an arrival window")
        if prediction.is_empty:
            return
        seen = {c for c, _ in prediction.items}
        if len(seen) != len(prediction.items):
            raise ValueError("duplicate contents in one prediction")
        self._advance(t)
        user = prediction.user_id
        if user in self.user_states:
            self.reset_user(user, t)
        if user not in self._user_ord:
            self._user_ord[user] = len(self._user_ord)
        gen = self._gen.get(user, 0) + 1
        self._gen[user] = gen
        a, b, _mid = prediction.window
        uord = self._user_ord[user]
        slots = []
        for content, w in prediction.items:
            cix = self.content_ix[content]
            slot = self._alloc()
            self._s_content[slot] = cix
            self._s_user[slot] = uord
            self._s_w[slot] = w
            self._s_a[slot] = a
            self._s_mid[slot] = _mid
            self._s_b[slot] = b
            slots.append(slot)
            if self._potent_at(w, prediction.window, t):
                self._add_potent(cix)
                if w > 0.0:
                    heapq.heappush(self._expiry, (b, 0, gen, user, cix))
                else:
                    heapq.heappush(self._expiry, (a, 1, gen, user, cix))
        self.user_states[user] = UserPredictionState(
            user, prediction.items, prediction.window, t, gen, slots)
        self._dirty = True

    def reset_user(self, user: str, t: float) -> None:
        """Remove the user's live prediction (no-op if none)."""
        self._advance(t)
        state = self.user_states.pop(user, None)
        if state is None:
            return
        self._gen[user] = state.gen + 1   # invalidate pending expiry entries
        if not state.expired:
            for (content, w), slot in zip(state.items, state.slots):
                if self._potent_at(w, state.window, t):
                    self._drop_potent(self.content_ix[content])
        for slot in state.slots:
            self._release(slot)
        if state.slots:
            self._dirty = True

    def refresh(self, t: float) -> None:
        """Periodic maintenance: collect predictions whose window has fully
        passed (t > b). Expired states stay as tombstones until the user's
        next request; their score contributions are already zero."""
        self._advance(t)
        for state in self.user_states.values():
            if not state.expired and t > state.window[1]:
                for slot in state.slots:
                    self._release(slot)
                if state.slots:
                    self._dirty = True
                state.slots = []
                state.expired = True
        self.last_refresh = t

    # -- aggregation --------------------------------------------------------

    def _canonical(self) -> dict:
        if self._dirty or self._view is None:
            idx = np.flatnonzero(self._in_use)
            order = np.lexsort((self._s_user[idx], self._s_content[idx]))
            sl = idx[order]
            content = self._s_content[sl]
            starts = np.flatnonzero(np.diff(content, prepend=-1))
            self._view = {
                "content": content,
                "uniq": content[starts] if content.size else content,
                "starts": starts,
                "w": self._s_w[sl],
                "a": self._s_a[sl],
                "mid": self._s_mid[sl],
                "b": self._s_b[sl],
                "user": self._s_user[sl],
            }
            self._dirty = False
        return self._view

    @staticmethod
    def _aggregate(view: dict, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        uniq, starts = view["uniq"], view["starts"]
        if uniq.size == 0:
            z = np.zeros(0)
            return uniq, z, z
        terms = view["w"] * score_vector(view["a"], view["mid"], view["b"], t)
        p1 = np.add.reduceat(terms, starts)
        ahead = np.where(view["a"] > t, view["a"], np.inf)
        nearest = np.minimum.reduceat(ahead, starts)
        p2 = np.where(np.isfinite(nearest), 1.0 / np.maximum(nearest - t, _MIN_GAP), 0.0)
        return uniq, p1, p2

    def scores(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(content ix array, P1 array, P2 array) over contents with any live
        contributor; contents absent from the result have key (0, 0)."""
        self._advance(t)
        return self._aggregate(self._canonical(), t)

    def rank_key(self, content: str, t: float) -> RankKey:
        uniq, p1, p2 = self.scores(t)
        i = np.searchsorted(uniq, self.content_ix[content])
        if i < uniq.size and uniq[i] == self.content_ix[content]:
            return (float(p1[i]), float(p2[i]))
        return (0.0, 0.0)

    def p1(self, content: str, t: float) -> float:
        return self.rank_key(content, t)[0]

    def p2(self, content: str, t: float) -> float:
        return self.rank_key(content, t)[1]

    def top_candidate(self, t: float, exclude: set[int]) -> Optional[tuple[str, RankKey]]:
        """Content with the maximal positive rank key whose ix is not excluded;
        ties break toward the smaller content id."""
        uniq, p1, p2 = self.scores(t)
        if uniq.size == 0:
            return None
        mask = (p1 > 0.0) | (p2 > 0.0)
        if exclude:
            mask &= ~np.isin(uniq, np.fromiter(exclude, dtype=np.int64, count=len(exclude)))
        if not mask.any():
            return None
        m1 = p1[mask].max()
        tied = mask & (p1 == m1)
        m2 = p2[tied].max()
        tied &= p2 == m2
        cix = int(uniq[tied].min())
        return self.content_ids[cix], (float(m1), float(m2))

    def min_key_among(self, contents: Sequence[str], t: float) -> Optional[tuple[str, RankKey]]:
        """Content with the minimal rank key among `contents`; ties break
        toward the larger content id (the smaller id survives)."""
        if not contents:
            return None
        uniq, p1, p2 = self.scores(t)
        ixs = np.fromiter((self.content_ix[c] for c in contents), dtype=np.int64,
                          count=len(contents))
        if uniq.size == 0:
            cp1 = np.zeros(len(contents))
            cp2 = np.zeros(len(contents))
        else:
            pos = np.clip(np.searchsorted(uniq, ixs), 0, uniq.size - 1)
            found = uniq[pos] == ixs
            cp1 = np.where(found, p1[pos], 0.0)
            cp2 = np.where(found, p2[pos], 0.0)
        m1 = cp1.min()
        tied = cp1 == m1
        m2 = cp2[tied].min()
        tied &= cp2 == m2
        cix = int(ixs[tied].max())
        return self.content_ids[cix], (float(m1), float(m2))

    # -- oracles and debugging ------------------------------------------------

    def recompute_oracle(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """From-scratch aggregation built only from user states (ignores the
        incremental slot arrays); used to verify board consistency."""
        rows = []
        for state in self.user_states.values():
            if state.expired:
                continue
            a, b, mid = state.window
            uord = self._user_ord[state.user_id]
            for content, w in state.items:
                rows.append((self.content_ix[content], uord, w, a, mid, b))
        if not rows:
            z = np.zeros(0)
            return np.zeros(0, dtype=np.int64), z, z
        arr = np.array(rows, dtype=np.float64)
        order = np.lexsort((arr[:, 1], arr[:, 0]))
        arr = arr[order]
        content = arr[:, 0].astype(np.int64)
        starts = np.flatnonzero(np.diff(content, prepend=-1))
        view = {
            "content": content, "uniq": content[starts], "starts": starts,
            "w": arr[:, 2], "a": arr[:, 3], "mid": arr[:, 4], "b": arr[:, 5],
        }
        return self._aggregate(view, t)

    def n_live_oracle(self, t: float) -> int:
        uniq, p1, p2 = self.recompute_oracle(t)
        return int(((p1 > 0.0) | (p2 > 0.0)).sum())

    def check_consistency(self, t: float) -> None:
        uniq, p1, p2 = self.scores(t)
        live = (p1 > 0.0) | (p2 > 0.0)
        o_uniq, o_p1, o_p2 = self.recompute_oracle(t)
        o_live = (o_p1 > 0.0) | (o_p2 > 0.0)
        if not (np.array_equal(uniq[live], o_uniq[o_live])
                and np.array_equal(p1[live], o_p1[o_live])
                and np.array_equal(p2[live], o_p2[o_live])):
            raise AssertionError(f"board aggregates diverged from recomputation at t={t}")
        if int(live.sum()) != self._n_live:
            raise AssertionError(
                f"n_live {self._n_live} != recount {int(live.sum())} at t={t}")

    def dump_csv(self, t: float, path) -> None:
        uniq, p1, p2 = self.scores(t)
        contributors: dict[int, list[str]] = {}
        for state in self.user_states.values():
            if state.expired:
                continue
            for content, _ in state.items:
                contributors.setdefault(self.content_ix[content], []).append(state.user_id)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["content", "P1", "P2", "contributing_users"])
            for i, cix in enumerate(uniq):
                writer.writerow([
                    self.content_ids[int(cix)], repr(float(p1[i])), repr(float(p2[i])),
                    ";".join(sorted(contributors.get(int(cix), []))),
                ])
