"""Next-request arrival window estimation from per-content watch-time statistics.

Watch time for a content is approximated by the interval from a request for it
to the same user's next request. Samples are capped per content kind, the
content length is estimated as the upper edge of the most populated histogram
bin, samples above that length are discarded, and the window center/width come
from the median and standard deviation of the survivors.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .trace import Kind, Trace

DEFAULT_CAPS = {
    Kind.TV_SERIES: 3600.0,
    Kind.MOVIE: 10800.0,
    Kind.SHOW: 3600.0,
    Kind.OTHER: 1800.0,
}

DEFAULT_MU = 1200.0
DEFAULT_SIGMA = 600.0


@dataclass(frozen=True, slots=True)
class ContentStats:
    mu: float          # median of filtered samples, seconds
    sigma: float       # population std of filtered samples, seconds
    n_samples: int


@dataclass
class WatchTimeStats:
    per_content: dict[str, ContentStats] = field(default_factory=dict)
    default_mu: float = DEFAULT_MU
    default_sigma: float = DEFAULT_SIGMA

    def lookup(self, content_id: str) -> tuple[float, float]:
        st = self.per_content.get(content_id)
        if st is None or st.n_samples == 0:
            return self.default_mu, self.default_sigma
        return st.mu, st.sigma

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["content", "mu", "sigma", "n_samples"])
            for cid in sorted(self.per_content):
                st = self.per_content[cid]
                writer.writerow([cid, f"{st.mu:.6f}", f"{st.sigma:.6f}", st.n_samples])

    @classmethod
    def from_csv(cls, path, default_mu: float = DEFAULT_MU,
                 default_sigma: float = DEFAULT_SIGMA) -> "WatchTimeStats":
        stats = cls(default_mu=default_mu, default_sigma=default_sigma)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for cid, mu, sigma, n in reader:
                stats.per_content[cid] = ContentStats(float(mu), float(sigma), int(n))
        return stats


def mode_filtered_stats(samples, bin_width: float = 60.0) -> ContentStats:
    """Estimate length as the upper edge of the most populated bin (bins are
    left-open/right-closed so a sample at exactly k*bin_width falls in the bin
    ending there; ties go to the largest bin), then drop samples above it."""
    arr = np.asarray(samples, dtype=float)
    if arr.size == 0:
        return ContentStats(0.0, 0.0, 0)
    idx = np.maximum(np.ceil(arr / bin_width).astype(int) - 1, 0)
    counts = np.bincount(idx)
    best = np.flatnonzero(counts == counts.max())[-1]
    length = (best + 1) * bin_width
    kept = arr[arr <= length]
    return ContentStats(float(np.median(kept)), float(np.std(kept)), int(kept.size))


def fit_watch_stats(trace: Trace, caps: Optional[dict[Kind, float]] = None,
                    bin_width: float = 60.0,
                    default_mu: float = DEFAULT_MU,
                    default_sigma: float = DEFAULT_SIGMA) -> WatchTimeStats:
    caps = {**DEFAULT_CAPS, **(caps or {})}
    samples: dict[str, list[float]] = {}
    for requests in trace.user_sequences().values():
        for cur, nxt in zip(requests, requests[1:]):
            cap = caps[cur.kind]
            samples.setdefault(cur.content_id, []).append(
                min(nxt.timestamp - cur.timestamp, cap))
    stats = WatchTimeStats(default_mu=default_mu, default_sigma=default_sigma)
    for cid, vals in samples.items():
        stats.per_content[cid] = mode_filtered_stats(vals, bin_width)
    return stats


def predict_arrival_window(stats: WatchTimeStats, content_id: str,
                           tau: float) -> tuple[float, float, float]:
    """Predicted arrival window (a, b, mid) for the next request after watching
    `content_id` starting at `tau`. a is clamped to tau; mid is recomputed from
    the clamped bounds so a <= mid <= b always holds."""
    if not math.isfinite(tau):
        raise ValueError("tau must be finite")
    mu, sigma = stats.lookup(content_id)
    a = tau + mu - sigma / 2.0
    b = tau + mu + sigma / 2.0
    a = max(a, tau)
    b = max(b, a)
    return a, b, (a + b) / 2.0
