"""Run configuration: a single JSON document drives trace generation, training,
simulation and analysis. Unknown keys are rejected with their full paths."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

from .simulator import SimConfig
from .trace import SyntheticConfig
from .tsas import TSASConfig


class ConfigError(ValueError):
    pass


_TOP_KEYS = {
    "seed", "trace", "workdir", "split_fraction", "capacity", "policy",
    "alpha", "beta", "gamma", "K", "update_period_s", "transmission_time_s",
    "topn", "ngram_n", "min_active_count", "tsas", "synthetic", "analysis",
}
_TSAS_KEYS = {"seq_len", "d", "n_blocks", "batch", "lr", "drop_rate",
              "k_cap_minutes", "epochs"}
_SYNTH_KEYS = {
    "seed", "n_users", "n_series", "episodes_per_series", "n_movies",
    "tv_fraction", "p_follow", "zipf_s", "markov_order", "markov_fanout",
    "session_length_mean", "off_mean", "watch_time_mean", "watch_time_std",
    "duration",
}
_ANALYSIS_KEYS = {"window_s", "list_size", "max_samples"}


def _check_keys(data: dict, allowed: set[str], prefix: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        listed = ", ".join(f"{prefix}{k}" for k in unknown)
        raise ConfigError(f"unknown config keys: {listed}")


@dataclass
class RunConfig:
    seed: int = 0
    trace: Optional[str] = None
    workdir: str = "runs"
    split_fraction: float = 0.8
    capacity: int = 2000
    policy: str = "pec"
    alpha: float = 0.5
    beta: float = 0.9
    gamma: float = 1.2
    K: int = 1
    update_period_s: float = 300.0
    transmission_time_s: float = 0.5
    topn: int = 10
    ngram_n: int = 3
    min_active_count: int = 3
    tsas: dict = field(default_factory=dict)
    synthetic: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        _check_keys(data, _TOP_KEYS, "")
        _check_keys(data.get("tsas", {}), _TSAS_KEYS, "tsas.")
        _check_keys(data.get("synthetic", {}), _SYNTH_KEYS, "synthetic.")
        _check_keys(data.get("analysis", {}), _ANALYSIS_KEYS, "analysis.")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def resolved(self) -> dict:
        out = asdict(self)
        out["tsas"] = asdict(self.tsas_config())
        out["synthetic"] = asdict(self.synthetic_config())
        return out

    def tsas_config(self) -> TSASConfig:
        t = self.tsas
        return TSASConfig(
            d=t.get("d", 50),
            seq_len=t.get("seq_len", 50),
            n_blocks=t.get("n_blocks", 2),
            k_cap=t.get("k_cap_minutes", 300),
            drop_rate=t.get("drop_rate", 0.2),
            lr=t.get("lr", 0.001),
            batch_size=t.get("batch", 128),
            epochs=t.get("epochs", 10),
            seed=self.seed,
        )

    def synthetic_config(self) -> SyntheticConfig:
        synth = dict(self.synthetic)
        synth.setdefault("seed", self.seed)
        return SyntheticConfig(**synth)

    def sim_config(self, **overrides) -> SimConfig:
        base = dict(
            capacity=self.capacity, policy=self.policy, alpha=self.alpha,
            beta=self.beta, gamma=self.gamma, K=self.K,
            update_period_s=self.update_period_s,
            transmission_time_s=self.transmission_time_s, topn=self.topn,
            min_active_count=self.min_active_count, seed=self.seed,
        )
        base.update(overrides)
        return SimConfig(**base)


def apply_overrides(data: dict, pairs: list[str]) -> dict:
    """Apply `a.b=value` overrides onto a raw config dict (values parsed as
    JSON when possible, else kept as strings)."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} crosses a non-object")
        node[parts[-1]] = value
    return data
