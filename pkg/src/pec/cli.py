"""Command-line entry point wiring the pipeline.

Subcommands: gen-trace (write a synthetic trace CSV), train (fit n-gram,
watch-time stats and the self-attention model; write checkpoints), simulate
(run one caching policy over the test split and write a report), report (join
run reports into a comparison CSV), analyze (recall-by-popularity and
prediction-accuracy tables). Every artifact embeds the resolved config and
seed, so runs are reproducible byte-for-byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import analysis as analysis_mod
from .arrival import WatchTimeStats, fit_watch_stats
from .config import ConfigError, RunConfig, apply_overrides
from .fusion import Predictors
from .ngram import NGramModel, build_ngram
from .simulator import run_simulation, write_event_log
from .trace import (Trace, filter_active, generate_synthetic_trace, parse_trace,
                    write_trace)
from .tsas import (TimeAwareScorer, TsasScorer, build_training_sequences,
                   load_scorer, save_checkpoint, train)


def _load_config(args) -> RunConfig:
    with open(args.config) as fh:
        data = json.load(fh)
    data = apply_overrides(data, args.set or [])
    return RunConfig.from_dict(data)


def _workdir(cfg: RunConfig) -> Path:
    path = Path(cfg.workdir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_meta(path: Path, cfg: RunConfig, extra: dict | None = None) -> None:
    meta = {"config": cfg.resolved()}
    if extra:
        meta.update(extra)
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def _trace_path(cfg: RunConfig, workdir: Path) -> Path:
    return Path(cfg.trace) if cfg.trace else workdir / "trace.csv"


def cmd_gen_trace(args) -> int:
    cfg = _load_config(args)
    workdir = _workdir(cfg)
    out = Path(args.out) if args.out else _trace_path(cfg, workdir)
    trace = generate_synthetic_trace(cfg.synthetic_config())
    write_trace(trace, out)
    _write_meta(out.with_suffix(out.suffix + ".meta.json"), cfg,
                {"requests": len(trace), "contents": len(trace.catalog)})
    print(f"wrote {len(trace)} requests to {out}")
    return 0


def _load_split(cfg: RunConfig, workdir: Path) -> tuple[Trace, Trace, Trace]:
    trace = parse_trace(_trace_path(cfg, workdir))
    meta_path = workdir / "train_meta.json"
    if meta_path.exists():
        with open(meta_path) as fh:
            split_time = json.load(fh)["split_time"]
        train_split, test_split = trace.split_at(split_time)
    else:
        train_split, test_split = trace.split_fraction(cfg.split_fraction)
    return trace, train_split, test_split


def cmd_train(args) -> int:
    cfg = _load_config(args)
    workdir = _workdir(cfg)
    trace = parse_trace(_trace_path(cfg, workdir))
    train_split, test_split = trace.split_fraction(cfg.split_fraction)
    split_time = test_split.requests[0].timestamp if test_split.requests else float("inf")
    users, contents = filter_active(train_split, cfg.min_active_count)

    model = build_ngram(train_split, cfg.ngram_n, users, contents)
    model.to_csv(workdir / "ngram.csv")

    stats = fit_watch_stats(train_split)
    stats.to_csv(workdir / "stats.csv")

    tsas_cfg = cfg.tsas_config()
    vocab = sorted(contents)
    seqs_c, seqs_t = build_training_sequences(train_split, users, contents, vocab,
                                              tsas_cfg.seq_len)
    scorer = TimeAwareScorer(len(vocab), tsas_cfg) if vocab else None
    losses: list[float] = []
    if scorer is not None and len(seqs_c):
        losses = train(scorer, seqs_c, seqs_t)
        save_checkpoint(str(workdir / "tsas"), vocab, scorer, losses,
                        {"run_config": cfg.resolved()})

    _write_meta(workdir / "train_meta.json", cfg, {
        "split_time": split_time,
        "active_users": len(users),
        "active_contents": len(contents),
        "train_requests": len(train_split),
        "test_requests": len(test_split),
        "tsas_epoch_losses": losses,
    })
    print(f"trained on {len(train_split)} requests "
          f"({len(users)} active users, {len(contents)} active contents)")
    return 0


def _load_predictors(cfg: RunConfig, workdir: Path, trace: Trace,
                     need_tsas: bool) -> Predictors:
    ngram_path = workdir / "ngram.csv"
    if not ngram_path.exists():
        raise ConfigError(f"missing checkpoint {ngram_path}; run `pec train` first")
    model = NGramModel.from_csv(ngram_path)
    tsas: TsasScorer | None = None
    if need_tsas:
        if not (workdir / "tsas.npz").exists():
            raise ConfigError(f"missing checkpoint {workdir / 'tsas.npz'}; run `pec train`")
        tsas = load_scorer(str(workdir / "tsas"))
    return Predictors(model, tsas, trace.catalog, cfg.topn)


def _seed_histories(train_split: Trace, history_len: int = 64) -> dict:
    return {user: [(r.content_id, r.timestamp) for r in reqs[-history_len:]]
            for user, reqs in train_split.user_sequences().items()}


def _load_stats(workdir: Path) -> WatchTimeStats:
    path = workdir / "stats.csv"
    if not path.exists():
        raise ConfigError(f"missing checkpoint {path}; run `pec train` first")
    return WatchTimeStats.from_csv(path)


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    workdir = _workdir(cfg)
    _, train_split, test_split = _load_split(cfg, workdir)
    sim_cfg = cfg.sim_config()

    predictors = stats = seed_hist = None
    if sim_cfg.policy in ("pec", "naive-pec"):
        predictors = _load_predictors(cfg, workdir, test_split,
                                      need_tsas=sim_cfg.policy == "pec")
        stats = _load_stats(workdir)
        seed_hist = _seed_histories(train_split)

    report, log = run_simulation(test_split, sim_cfg, predictors, stats, seed_hist)
    tag = sim_cfg.policy
    log_path = workdir / f"events_{tag}.csv"
    write_event_log(log, log_path)
    report.event_log_path = str(log_path)
    report.to_json(workdir / f"report_{tag}.json")
    with open(workdir / f"hit_series_{tag}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window", "hit_ratio"])
        for i, ratio in enumerate(report.hit_ratio_series):
            writer.writerow([i, repr(ratio)])
    print(f"{tag}: hit ratio {report.hit_ratio:.4f}, "
          f"latency reduction {report.latency_reduction:.4f}")
    return 0


def cmd_report(args) -> int:
    cfg = _load_config(args)
    workdir = _workdir(cfg)
    paths = [Path(p) for p in args.runs] or sorted(workdir.glob("report_*.json"))
    rows = []
    for path in paths:
        with open(path) as fh:
            rep = json.load(fh)
        rows.append({
            "policy": rep["policy"],
            "requests": rep["requests"],
            "hit_ratio": rep["hit_ratio"],
            "latency_reduction": rep["latency_reduction"],
            "prefetch_count": rep["prefetch_count"],
            "utilization_demand": rep["utilization_demand"],
            "utilization_prefetch": rep["utilization_prefetch"],
        })
    out = workdir / "comparison.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["policy"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {out} ({len(rows)} runs)")
    return 0


def cmd_analyze(args) -> int:
    cfg = _load_config(args)
    workdir = _workdir(cfg)
    full, train_split, test_split = _load_split(cfg, workdir)
    predictors = _load_predictors(cfg, workdir, test_split, need_tsas=True)
    stats = _load_stats(workdir)
    seed_hist = _seed_histories(train_split)

    window = cfg.analysis.get("window_s", 1800.0)
    list_size = cfg.analysis.get("list_size", 2000)
    snaps = analysis_mod.collect_snapshots(test_split, predictors, stats,
                                           window, list_size, seed_hist)
    ranks = analysis_mod.popularity_ranks(full)
    rows = analysis_mod.recall_by_popularity(snaps, test_split, ranks, window)
    analysis_mod.write_recall_csv(rows, workdir / "recall_by_popularity.csv")

    result = analysis_mod.evaluate_predictions(
        test_split, predictors, seed_histories=seed_hist,
        max_samples=cfg.analysis.get("max_samples"))
    analysis_mod.write_accuracy_csv(result, workdir / "prediction_accuracy.csv")
    print(f"tv heuristic accuracy {result.tv_accuracy:.4f} over {result.tv_samples} pairs; "
          f"fused hit@10 {result.hit_ratio('fused', 10):.4f} over "
          f"{result.fusion_samples} pairs")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("gen-trace", cmd_gen_trace), ("train", cmd_train),
                     ("simulate", cmd_simulate), ("report", cmd_report),
                     ("analyze", cmd_analyze)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value (dotted path)")
        if name == "gen-trace":
            p.add_argument("--out")
        if name == "report":
            p.add_argument("runs", nargs="*")
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
