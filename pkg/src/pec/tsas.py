"""Time-aware self-attention next-content scorer.

Candidate-conditioned attention: the candidate content embedding is the
attention query, keys/values combine the embeddings of earlier requests with
embeddings of the quantized time gaps to them, and the candidate's score is
the dot product of the resulting context vector (after a stack of point-wise
feed-forward blocks) with the candidate embedding. Training scores the true
next content as the positive and one uniformly sampled other content as the
negative, with binary cross-entropy.

Training runs in torch (float64, Adam); trained weights are exported to plain
numpy arrays for inference, which is dropout-free and deterministic.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .trace import Trace

PAD = 0
LN_EPS = 1e-8


@dataclass(frozen=True)
class TSASConfig:
    d: int = 50
    seq_len: int = 50
    n_blocks: int = 2
    k_cap: int = 300            # max quantized interval bucket (minutes)
    bucket_seconds: float = 60.0
    drop_rate: float = 0.2
    lr: float = 0.001
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        if min(self.d, self.seq_len, self.n_blocks, self.k_cap) <= 0:
            raise ValueError("d, seq_len, n_blocks, k_cap must be positive")


def quantize_interval(delta_t: float, k_cap: int = 300,
                      bucket_seconds: float = 60.0) -> int:
    """Bucket index floor(delta_t / bucket) capped at k_cap."""
    if delta_t < 0:
        raise ValueError(f"negative time interval {delta_t}")
    return min(int(delta_t // bucket_seconds), k_cap)


class TimeAwareScorer(nn.Module):
    def __init__(self, vocab_size: int, cfg: TSASConfig):
        super().__init__()
        if vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        self.cfg = cfg
        self.vocab_size = vocab_size
        d = cfg.d
        dt = torch.float64

        def emb(rows):
            w = torch.empty(rows, d, dtype=dt)
            nn.init.trunc_normal_(w, std=cfg.init_std)
            return nn.Parameter(w)

        self.E_c = emb(vocab_size + 1)          # row 0 is padding
        self.E_tk = emb(cfg.k_cap + 1)
        self.E_tv = emb(cfg.k_cap + 1)
        self.Wq = nn.Parameter(self._square(d, cfg.init_std))
        self.Wk = nn.Parameter(self._square(d, cfg.init_std))
        self.Wv = nn.Parameter(self._square(d, cfg.init_std))
        self.ffn_w1 = nn.ParameterList(
            [nn.Parameter(self._square(d, cfg.init_std)) for _ in range(cfg.n_blocks)])
        self.ffn_b1 = nn.ParameterList(
            [nn.Parameter(torch.zeros(d, dtype=dt)) for _ in range(cfg.n_blocks)])
        self.ffn_w2 = nn.ParameterList(
            [nn.Parameter(self._square(d, cfg.init_std)) for _ in range(cfg.n_blocks)])
        self.ffn_b2 = nn.ParameterList(
            [nn.Parameter(torch.zeros(d, dtype=dt)) for _ in range(cfg.n_blocks)])
        self.ln_g = nn.ParameterList(
            [nn.Parameter(torch.ones(d, dtype=dt)) for _ in range(cfg.n_blocks)])
        self.ln_b = nn.ParameterList(
            [nn.Parameter(torch.zeros(d, dtype=dt)) for _ in range(cfg.n_blocks)])

    @staticmethod
    def _square(d: int, std: float) -> torch.Tensor:
        w = torch.empty(d, d, dtype=torch.float64)
        nn.init.trunc_normal_(w, std=std)
        return w

    def _buckets(self, q_times: torch.Tensor, times: torch.Tensor) -> torch.Tensor:
        delta = q_times.unsqueeze(-1) - times.unsqueeze(-2)
        idx = torch.div(delta, self.cfg.bucket_seconds, rounding_mode="floor")
        return idx.clamp(0, self.cfg.k_cap).long()

    def _ffn_stack(self, h: torch.Tensor, train_mode: bool) -> torch.Tensor:
        # residual around each point-wise FFN, post-norm; dropout on FFN output
        for blk in range(self.cfg.n_blocks):
            f = torch.nn.functional.gelu(h @ self.ffn_w1[blk] + self.ffn_b1[blk])
            f = f @ self.ffn_w2[blk] + self.ffn_b2[blk]
            if train_mode and self.cfg.drop_rate > 0:
                f = torch.nn.functional.dropout(f, self.cfg.drop_rate, training=True)
            h = h + f
            mean = h.mean(dim=-1, keepdim=True)
            var = h.var(dim=-1, keepdim=True, unbiased=False)
            h = (h - mean) / torch.sqrt(var + LN_EPS) * self.ln_g[blk] + self.ln_b[blk]
        return h

    def context(self, contents: torch.Tensor, times: torch.Tensor,
                q_contents: torch.Tensor, q_times: torch.Tensor,
                train_mode: bool = False,
                return_attention: bool = False):
        """Latent context vectors for each (position, query) pair.

        contents/times: (B, L) key-side sequence, pad index 0.
        q_contents/q_times: (B, L) query content and its timestamp per position;
        position i attends the strictly earlier, non-padding positions j < i.
        """
        d = self.cfg.d
        q = self.E_c[q_contents] @ self.Wq                      # (B, L, d)
        kc = self.E_c[contents] @ self.Wk                       # (B, L, d)
        vc = self.E_c[contents] @ self.Wv
        buckets = self._buckets(q_times, times)                 # (B, L, L)
        logits = q @ kc.transpose(-1, -2)
        logits = logits + torch.gather(q @ self.E_tk.T, 2, buckets)
        logits = logits / math.sqrt(d)

        L = contents.shape[-1]
        causal = torch.tril(torch.ones(L, L, dtype=torch.bool), diagonal=-1)
        valid = causal.unsqueeze(0) & (contents != PAD).unsqueeze(-2)
        logits = torch.where(valid, logits, torch.full_like(logits, -1e30))
        alpha = torch.softmax(logits, dim=-1)
        alpha = alpha * valid.any(dim=-1, keepdim=True)         # rows with no context -> 0

        z = alpha @ vc
        hist = torch.zeros(*alpha.shape[:-1], self.cfg.k_cap + 1, dtype=alpha.dtype)
        hist = hist.scatter_add(-1, buckets, alpha)
        z = z + hist @ self.E_tv
        h = self._ffn_stack(z, train_mode)
        if return_attention:
            return h, alpha
        return h

    def position_scores(self, contents, times, q_contents, q_times,
                        train_mode: bool = False) -> torch.Tensor:
        h = self.context(contents, times, q_contents, q_times, train_mode)
        return (h * self.E_c[q_contents]).sum(dim=-1)            # (B, L)


def forward_scores(model: TimeAwareScorer, contents: Sequence[int],
                   times: Sequence[float], position: int,
                   candidates: Sequence[int], train_mode: bool = False,
                   return_attention: bool = False):
    """Scores of each candidate at `position` (0-based) of one sequence."""
    n = len(candidates)
    if any(not (1 <= c <= model.vocab_size) for c in candidates):
        raise ValueError("candidate index out of range")
    if not 0 <= position < len(contents):
        raise ValueError("position out of range")
    c = torch.as_tensor(contents, dtype=torch.long).repeat(n, 1)
    t = torch.as_tensor(times, dtype=torch.float64).repeat(n, 1)
    qc = c.clone()
    qc[:, position] = torch.as_tensor(candidates, dtype=torch.long)
    out = model.context(c, t, qc, t, train_mode, return_attention)
    h, alpha = out if return_attention else (out, None)
    scores = (h[:, position] * model.E_c[torch.as_tensor(candidates)]).sum(dim=-1)
    result = {int(cand): float(s) for cand, s in zip(candidates, scores)}
    if return_attention:
        return result, alpha[:, position].detach()
    return result


def sample_negatives(targets: torch.Tensor, vocab_size: int,
                     generator: torch.Generator) -> torch.Tensor:
    """Uniform over contents != target. Needs vocab_size >= 2."""
    if vocab_size < 2:
        raise ValueError("need at least 2 contents to sample negatives")
    r = torch.randint(1, vocab_size, targets.shape, generator=generator)
    return r + (r >= targets).long()


def training_loss(model: TimeAwareScorer, contents: torch.Tensor,
                  times: torch.Tensor, rng_seed: int,
                  train_mode: bool = False) -> tuple[torch.Tensor, int]:
    """Mean per-position BCE with one sampled negative; (loss, n_positions).

    Deterministic for a fixed seed, so finite differences of the returned loss
    are well-defined.
    """
    g = torch.Generator().manual_seed(rng_seed)
    valid = contents != PAD
    if not valid.any():
        return torch.zeros((), dtype=torch.float64), 0
    neg = sample_negatives(contents.clamp(min=1), model.vocab_size, g)
    s_pos = model.position_scores(contents, times, contents, times, train_mode)
    s_neg_full = model.context(contents, times, neg, times, train_mode)
    s_neg = (s_neg_full * model.E_c[neg]).sum(dim=-1)
    per_pos = torch.nn.functional.softplus(-s_pos) + torch.nn.functional.softplus(s_neg)
    n = int(valid.sum())
    return (per_pos * valid).sum() / n, n


def bce_pair_loss(score_pos: float, score_neg: float) -> float:
    """Reference per-position loss: -log sigmoid(pos) - log(1 - sigmoid(neg))."""
    return math.log1p(math.exp(-score_pos)) + math.log1p(math.exp(score_neg))


def build_training_sequences(trace: Trace, active_users: set[str],
                             active_contents: set[str],
                             vocab: Sequence[str], seq_len: int,
                             origin: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Chunk each active user's filtered history into length-seq_len windows
    (newest chunk full; the oldest is left-padded with PAD at the origin
    timestamp). Returns (contents, times) int64/float64 arrays of shape (N, L)."""
    ix = {c: i + 1 for i, c in enumerate(vocab)}
    rows_c: list[np.ndarray] = []
    rows_t: list[np.ndarray] = []
    for user, requests in trace.user_sequences().items():
        if user not in active_users:
            continue
        pairs = [(ix[r.content_id], r.timestamp) for r in requests
                 if r.content_id in active_contents]
        if not pairs:
            continue
        end = len(pairs)
        while end > 0:
            start = max(0, end - seq_len)
            chunk = pairs[start:end]
            pad = seq_len - len(chunk)
            rows_c.append(np.array([PAD] * pad + [c for c, _ in chunk], dtype=np.int64))
            rows_t.append(np.array([origin] * pad + [t for _, t in chunk]))
            end = start
    if not rows_c:
        return np.zeros((0, seq_len), dtype=np.int64), np.zeros((0, seq_len))
    return np.stack(rows_c), np.stack(rows_t)


def train(model: TimeAwareScorer, contents: np.ndarray, times: np.ndarray,
          epochs: Optional[int] = None) -> list[float]:
    """Adam training over chunked sequences; returns per-epoch mean loss.

    Deterministic for a fixed cfg.seed: batch order, negative samples, and
    dropout all derive from it."""
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    n = contents.shape[0]
    if n == 0:
        return []
    torch.manual_seed(cfg.seed)
    g = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    c_all = torch.from_numpy(contents)
    t_all = torch.from_numpy(times)
    losses = []
    step = 0
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=g)
        total, positions = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            seed = cfg.seed * 1_000_003 + step
            loss, k = training_loss(model, c_all[idx], t_all[idx], seed, train_mode=True)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss) * k
            positions += k
            step += 1
        losses.append(total / max(positions, 1))
    return losses


# ---------------------------------------------------------------------------
# Frozen inference
# ---------------------------------------------------------------------------

class TsasScorer:
    """Numpy inference over exported weights: scores all vocabulary contents
    given a user's recent history, with the candidate slot at time t_now."""

    def __init__(self, vocab: Sequence[str], weights: dict[str, np.ndarray],
                 cfg: TSASConfig):
        self.vocab = list(vocab)
        self.cfg = cfg
        self.ix = {c: i + 1 for i, c in enumerate(self.vocab)}
        self.w = weights
        ec = weights["E_c"][1:]                       # (V, d)
        self._q_all = ec @ weights["Wq"]
        self._qt_all = self._q_all @ weights["E_tk"].T
        self._sqrt_d = math.sqrt(cfg.d)

    @classmethod
    def from_model(cls, vocab: Sequence[str], model: TimeAwareScorer) -> "TsasScorer":
        return cls(vocab, export_weights(model), model.cfg)

    def _ffn_stack(self, h: np.ndarray) -> np.ndarray:
        from scipy.special import erf  # local import keeps numpy-only paths light
        for blk in range(self.cfg.n_blocks):
            pre = h @ self.w[f"ffn_w1.{blk}"] + self.w[f"ffn_b1.{blk}"]
            act = 0.5 * pre * (1.0 + erf(pre / math.sqrt(2.0)))
            f = act @ self.w[f"ffn_w2.{blk}"] + self.w[f"ffn_b2.{blk}"]
            h = h + f
            mean = h.mean(axis=-1, keepdims=True)
            var = h.var(axis=-1, keepdims=True)
            h = (h - mean) / np.sqrt(var + LN_EPS) * self.w[f"ln_g.{blk}"] + self.w[f"ln_b.{blk}"]
        return h

    def score_all(self, history: Sequence[tuple[str, float]], t_now: float) -> np.ndarray:
        hist = [(self.ix[c], ts) for c, ts in history if c in self.ix]
        hist = hist[-(self.cfg.seq_len - 1):]
        ec = self.w["E_c"]
        if not hist:
            h = self._ffn_stack(np.zeros((1, self.cfg.d)))
            return (ec[1:] @ h[0])
        ixs = np.array([c for c, _ in hist], dtype=np.int64)
        buckets = np.array([
            quantize_interval(max(t_now - ts, 0.0), self.cfg.k_cap, self.cfg.bucket_seconds)
            for _, ts in hist
        ])
        keys = ec[ixs] @ self.w["Wk"] + self.w["E_tk"][buckets]        # (L, d)
        vals = ec[ixs] @ self.w["Wv"] + self.w["E_tv"][buckets]
        logits = (self._q_all @ keys.T + self._qt_all[:, buckets]) / self._sqrt_d
        logits -= logits.max(axis=1, keepdims=True)
        alpha = np.exp(logits)
        alpha /= alpha.sum(axis=1, keepdims=True)
        h = self._ffn_stack(alpha @ vals)                              # (V, d)
        return (h * ec[1:]).sum(axis=1)

    def topn(self, history: Sequence[tuple[str, float]], t_now: float,
             n_out: int) -> list[tuple[str, float]]:
        scores = self.score_all(history, t_now)
        order = np.lexsort((np.arange(scores.size), -scores))[:n_out]
        return [(self.vocab[i], float(scores[i])) for i in order]


def export_weights(model: TimeAwareScorer) -> dict[str, np.ndarray]:
    return {name: p.detach().numpy().copy() for name, p in model.named_parameters()}


def save_checkpoint(path_prefix: str, vocab: Sequence[str], model: TimeAwareScorer,
                    losses: list[float], extra: Optional[dict] = None) -> None:
    weights = export_weights(model)
    np.savez(path_prefix + ".npz", **weights)
    manifest = {
        "config": asdict(model.cfg),
        "vocab": list(vocab),
        "shapes": {k: list(v.shape) for k, v in weights.items()},
        "epoch_losses": losses,
        "init": "truncated normal, std from config (not paper-verified)",
        "optimizer": "Adam, torch defaults (betas 0.9/0.999, eps 1e-8)",
    }
    if extra:
        manifest.update(extra)
    with open(path_prefix + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_scorer(path_prefix: str) -> TsasScorer:
    with open(path_prefix + ".json") as fh:
        manifest = json.load(fh)
    weights = dict(np.load(path_prefix + ".npz"))
    cfg = TSASConfig(**{k: v for k, v in manifest["config"].items()})
    return TsasScorer(manifest["vocab"], weights, cfg)
