"""n-gram next-content model over per-user request sequences, with backoff.

Counts are accumulated per user over consecutive windows of that user's own
sequence (restricted to active users/contents); windows never span users.
Prediction uses the longest matching context and backs off through shorter
contexts down to the global unigram distribution.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from typing import Iterable, Optional, Sequence

from .trace import Trace

Context = tuple[str, ...]


class NGramModel:
    def __init__(self, n: int):
        if n < 2:
            raise ValueError("n must be >= 2")
        self.n = n
        # tables[m] maps a length-(m-1) context tuple to a Counter of next contents
        self.tables: dict[int, dict[Context, Counter]] = {m: {} for m in range(1, n + 1)}

    def add_sequence(self, seq: Sequence[str]) -> None:
        for m in range(1, self.n + 1):
            table = self.tables[m]
            for i in range(len(seq) - m + 1):
                ctx = tuple(seq[i:i + m - 1])
                counts = table.get(ctx)
                if counts is None:
                    counts = table[ctx] = Counter()
                counts[seq[i + m - 1]] += 1

    @property
    def vocab(self) -> set[str]:
        uni = self.tables[1].get(())
        return set(uni) if uni else set()

    def distribution(self, history: Sequence[str]) -> tuple[Context, dict[str, float]]:
        """Longest-match backoff: the matched context and its normalized
        next-content distribution. Empty model yields ((), {})."""
        max_ctx = min(self.n - 1, len(history))
        for length in range(max_ctx, -1, -1):
            ctx = tuple(history[len(history) - length:])
            counts = self.tables[length + 1].get(ctx)
            if counts:
                total = sum(counts.values())
                return ctx, {c: k / total for c, k in counts.items()}
        return (), {}

    def topn(self, history: Sequence[str], n_out: int) -> list[tuple[str, float]]:
        if n_out < 1:
            raise ValueError("n_out must be >= 1")
        _, dist = self.distribution(history)
        ranked = sorted(dist.items(), key=lambda kv: (-kv[1], kv[0]))
        return ranked[:n_out]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["order", "context", "content", "count"])
            for m in range(1, self.n + 1):
                for ctx in sorted(self.tables[m]):
                    for content in sorted(self.tables[m][ctx]):
                        writer.writerow([m, json.dumps(list(ctx)), content,
                                         self.tables[m][ctx][content]])

    @classmethod
    def from_csv(cls, path) -> "NGramModel":
        rows = []
        max_order = 1
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                order, ctx_json, content, count = row
                rows.append((int(order), tuple(json.loads(ctx_json)), content, int(count)))
                max_order = max(max_order, int(order))
        model = cls(max(max_order, 2))
        for order, ctx, content, count in rows:
            table = model.tables[order]
            counts = table.get(ctx)
            if counts is None:
                counts = table[ctx] = Counter()
            counts[content] = count
        return model


def build_ngram(trace: Trace, n: int,
                active_users: Optional[set[str]] = None,
                active_contents: Optional[set[str]] = None) -> NGramModel:
    model = NGramModel(n)
    for user, requests in trace.user_sequences().items():
        if active_users is not None and user not in active_users:
            continue
        seq = [r.content_id for r in requests
               if active_contents is None or r.content_id in active_contents]
        model.add_sequence(seq)
    return model
