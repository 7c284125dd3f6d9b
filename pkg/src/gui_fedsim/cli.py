"""Command line: synth, partition, train, evaluate, report.

Every subcommand reads one JSON config (``--config``) and writes into
``out_dir``. Exit codes: 0 ok, 1 config error, 2 data error, 3 run failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import toy
from .actions import ActionKind, serialize_action
from .config import ConfigError, FullPartition, RunConfig, _sub_seed, load_config, resolve
from .episodes import (
    EmptyCorpus,
    InsufficientEpisodes,
    InvalidEpisode,
    IoFailure,
    clean,
    dump_episodes,
    file_resolver,
    load_episodes,
    sample_test_set,
)
from .fileio import atomic_write_text, read_json, sha256_file, write_json, write_jsonl
from .fl import FLError, ServerState, TrainerFailure, communication_ledger, lora_param_count, run
from .metrics import EvalError, PredictionRecord, evaluate, load_predictions, write_report
from .partition import PartitionError, compose_full, partition, partition_stats, read_manifest, stats_csv, write_manifest

log = logging.getLogger("gui_fedsim")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUN = 0, 1, 2, 3


class IncompleteRun(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run directory helpers
# ---------------------------------------------------------------------------


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir)


def _update_run_json(cfg: RunConfig, stage: str, info: dict) -> None:
    path = _out(cfg) / "run.json"
    d = read_json(path) if path.exists() else {}
    d["config"] = cfg.to_dict()
    d["config_hash"] = cfg.hash
    d.setdefault("stages", {})[stage] = info
    write_json(path, d)


def _load_corpus(cfg: RunConfig):
    path = cfg.corpus_file
    if not path.exists():
        raise DataError(f"corpus {path} not found")
    episodes, rejected = load_episodes(path)
    for r in rejected:
        log.warning("rejected %s: %s", r.episode_id, r.reason.value)
    return episodes, sha256_file(path) if path.is_file() else None


def _checkpoint_path(cfg: RunConfig, round_index: int) -> Path:
    return _out(cfg) / "checkpoints" / f"round_{round_index:04d}.json"


def _write_checkpoint(path: Path, cfg: RunConfig, state: ServerState) -> None:
    write_json(path, {"config_hash": cfg.hash, "state": state.to_dict()})


def _read_checkpoint(path) -> ServerState:
    try:
        return ServerState.from_dict(read_json(path)["state"])
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}") from exc


def _latest_checkpoint(cfg: RunConfig) -> Path | None:
    found = sorted((_out(cfg) / "checkpoints").glob("round_*.json"))
    return found[-1] if found else None


def _distribution(cfg: RunConfig) -> str:
    p = cfg.partition
    if isinstance(p, FullPartition):
        return p.variant.value
    return f"{p.axis.value}/{p.scheme.value}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> Path:
    if cfg.synth is None:
        raise ConfigError("config has no synth section")
    episodes = toy.gen_synthetic(cfg.synth)
    path = cfg.corpus_file
    try:
        dump_episodes(episodes, path)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    _update_run_json(cfg, "synth", {"episodes": len(episodes), "corpus_sha256": sha256_file(path)})
    log.info("wrote %d episodes to %s", len(episodes), path)
    return path


def cmd_partition(cfg: RunConfig) -> Path:
    episodes, corpus_sha = _load_corpus(cfg)
    resolver = file_resolver(cfg.image_root) if cfg.image_root else None
    kept, rejected = clean(episodes, resolver)
    if not kept:
        raise EmptyCorpus("nothing left after cleaning")
    test, train = [], []
    by_source: dict[str, list] = {}
    for e in kept:
        by_source.setdefault(e.tag.source, []).append(e)
    for source in sorted(by_source):
        te, tr = sample_test_set(by_source[source], cfg.test_per_source, _sub_seed(cfg.master_seed, "test-split"))
        test += te
        train += tr
    if isinstance(cfg.partition, FullPartition):
        p = cfg.partition
        manifest = compose_full(train, p.variant, p.num_clients, seed=_sub_seed(cfg.master_seed, "partition"),
                                alpha=p.alpha)
    else:
        manifest = partition(train, cfg.partition)
    out = _out(cfg)
    extra = {"config_hash": cfg.hash, "corpus_sha256": corpus_sha}
    write_manifest(manifest, out / "manifest.json", extra)
    rows = partition_stats(manifest, dense=True)
    atomic_write_text(out / "stats.csv", f"# config_hash={cfg.hash}\n" + stats_csv(rows))
    dump_episodes(test, out / "test.jsonl")
    write_jsonl(out / "rejections.jsonl", [{**r.to_dict(), "config_hash": cfg.hash} for r in rejected])
    _update_run_json(cfg, "partition", {
        "corpus_sha256": corpus_sha,
        "train_episodes": manifest.num_episodes,
        "test_episodes": len(test),
        "rejected": len(rejected),
        "clients": len(manifest.shards),
    })
    return out / "manifest.json"


def cmd_train(cfg: RunConfig, resume: str | None = None) -> Path:
    out = _out(cfg)
    manifest_path = out / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{manifest_path} missing; run partition first")
    manifest = read_manifest(manifest_path)
    episodes, corpus_sha = _load_corpus(cfg)
    resolver = file_resolver(cfg.image_root) if cfg.image_root else None
    kept, _ = clean(episodes, resolver)
    corpus = {e.episode_id: e for e in kept}
    missing = [e for s in manifest.shards.values() for e in s if e not in corpus]
    if missing:
        raise DataError(f"manifest references {len(missing)} unknown episodes, e.g. {missing[0]}")

    logs_path = out / "rounds.jsonl"
    if resume:
        ck = _latest_checkpoint(cfg) if resume == "latest" else Path(resume)
        if ck is None or not ck.exists():
            raise DataError(f"no checkpoint to resume from ({resume})")
        state = _read_checkpoint(ck)
        if state.algo != cfg.algo:
            raise ConfigError("checkpoint algorithm differs from the config")
        kept_lines = []
        if logs_path.exists():
            kept_lines = [ln for ln in logs_path.read_text(encoding="utf-8").splitlines()
                          if ln and json.loads(ln)["round"] <= state.round]
        log.info("resuming from round %d", state.round)
    else:
        state = ServerState(toy.init_params(cfg.trainer.feature_dim), algo=cfg.algo)
        kept_lines = []
        _write_checkpoint(_checkpoint_path(cfg, 0), cfg, state)

    lines = list(kept_lines)

    def on_round(st: ServerState, rl) -> None:
        d = rl.to_dict(timing=cfg.record_wall_time)
        if not cfg.record_wall_time:
            d["wall_time_ms"] = 0.0
        d["config_hash"] = cfg.hash
        lines.append(json.dumps(d, sort_keys=True))
        _write_checkpoint(_checkpoint_path(cfg, st.round), cfg, st)
        atomic_write_text(logs_path, "".join(ln + "\n" for ln in lines))
        log.info("round %d: clients %s", rl.round, ",".join(rl.selected_clients))

    trainer = toy.ToyTrainer(cfg.trainer)
    state, _ = run(state, manifest, corpus, trainer, cfg.round, on_round)
    if not lines:
        atomic_write_text(logs_path, "")
    _write_checkpoint(out / "checkpoint.json", cfg, state)

    rc = cfg.round
    adapter = lora_param_count([(toy.NUM_KINDS, cfg.trainer.feature_dim + 1)], cfg.lora_rank)
    ledger = communication_ledger(state.dim, adapter, rc.total_rounds, rc.clients_per_round, rc.bytes_per_param)
    ledger["lora_rank"] = cfg.lora_rank
    ledger["config_hash"] = cfg.hash
    write_json(out / "comm_ledger.json", ledger)
    _update_run_json(cfg, "train", {"corpus_sha256": corpus_sha, "rounds": state.round})
    return out / "checkpoint.json"


def toy_predictions(params: np.ndarray, episodes, feature_dim: int) -> list[PredictionRecord]:
    """The toy model predicts the action kind; parameters are copied from
    gold when the kind matches, so success reduces to kind accuracy."""
    out = []
    for e in episodes:
        X, _ = toy.featurize_arrays(e, feature_dim)
        kinds = toy.predict(params, X)
        for step, k in zip(e.steps, kinds):
            kind = ActionKind.from_index(int(k))
            text = serialize_action(step.action) if kind is step.action.kind else kind.value
            out.append(PredictionRecord(e.episode_id, step.index, text))
    return out


def cmd_evaluate(cfg: RunConfig, checkpoint: str | None = None, predictions: str | None = None,
                 test_path: str | None = None) -> Path:
    out = _out(cfg)
    test_file = Path(test_path) if test_path else out / "test.jsonl"
    if not test_file.exists():
        raise DataError(f"test corpus {test_file} not found")
    test, _ = load_episodes(test_file)
    if predictions:
        preds = load_predictions(predictions)
        source = {"predictions_sha256": sha256_file(predictions)}
    else:
        ck = Path(checkpoint) if checkpoint else out / "checkpoint.json"
        if not ck.exists():
            raise DataError(f"checkpoint {ck} not found")
        state = _read_checkpoint(ck)
        preds = toy_predictions(state.params, test, cfg.trainer.feature_dim)
        write_jsonl(out / "predictions.jsonl", [p.to_dict() for p in preds])
        source = {"checkpoint_round": state.round}
    report = evaluate(preds, test)
    run_json = out / "run.json"
    corpus_sha = read_json(run_json).get("stages", {}).get("partition", {}).get("corpus_sha256") \
        if run_json.exists() else None
    extra = {"config_hash": cfg.hash, "corpus_sha256": corpus_sha, "test_sha256": sha256_file(test_file),
             "distribution": _distribution(cfg), "algorithm": cfg.algo.name.value, **source}
    write_report(report, out / "report.json", out / "report.csv", extra)
    _update_run_json(cfg, "evaluate", {"test_sha256": extra["test_sha256"], **source})
    return out / "report.json"


REPORT_METRICS = ("type_acc", "ground_acc", "sr")


def cmd_report(run_dirs: Sequence[str], groups: Sequence[str] = ("ALL",)) -> str:
    """distribution x algorithm x metric table, one row per (run, group)."""
    loaded = []
    for d in run_dirs:
        path = Path(d) / "report.json"
        if not path.exists():
            raise IncompleteRun(f"{d} has no report.json")
        loaded.append((d, read_json(path)))
    hashes = {r.get("corpus_sha256") for _, r in loaded}
    if len(hashes) > 1:
        raise DataError(f"runs were built from different corpora: {sorted(map(str, hashes))}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "distribution", "algorithm", "group", *REPORT_METRICS, "n_steps", "config_hash"])
    for d, r in loaded:
        for g in groups:
            if g not in r["groups"]:
                raise IncompleteRun(f"{d} has no group {g}")
            s = r["groups"][g]
            w.writerow([Path(d).name, r.get("distribution"), r.get("algorithm"), g,
                        *(repr(s[m]) for m in REPORT_METRICS), s["n_steps"], r.get("config_hash")])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gui-fedsim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config (defaults apply to missing keys)")
        sp.add_argument("--seed", type=int, help="override master_seed")
        sp.add_argument("--out", help="override out_dir")

    common(sub.add_parser("synth", help="write a synthetic corpus"))
    common(sub.add_parser("partition", help="clean, carve the test set, split across clients"))
    sp = sub.add_parser("train", help="run the federated rounds")
    common(sp)
    sp.add_argument("--resume", nargs="?", const="latest", help="checkpoint path, or latest when bare")
    sp = sub.add_parser("evaluate", help="score the checkpoint or a prediction file")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--test")
    sp.add_argument("--predictions", help="replay this JSONL instead of running the model")
    sp = sub.add_parser("report", help="merge finished runs into one table")
    sp.add_argument("run_dirs", nargs="+")
    sp.add_argument("--group", action="append", help="group key (repeatable, default ALL)")
    sp.add_argument("--out", help="CSV path (stdout when absent)")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else resolve(RunConfig())
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _dispatch(args) -> None:
    if args.command == "report":
        table = cmd_report(args.run_dirs, args.group or ("ALL",))
        if args.out:
            atomic_write_text(args.out, table)
        else:
            sys.stdout.write(table)
        return
    cfg = _config(args)
    if args.command == "synth":
        cmd_synth(cfg)
    elif args.command == "partition":
        cmd_partition(cfg)
    elif args.command == "train":
        cmd_train(cfg, args.resume)
    elif args.command == "evaluate":
        cmd_evaluate(cfg, args.checkpoint, args.predictions, args.test)


DATA_ERRORS = (DataError, IncompleteRun, EmptyCorpus, InsufficientEpisodes, InvalidEpisode, IoFailure,
               PartitionError, EvalError, FileNotFoundError)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (FLError, TrainerFailure, toy.EmptyShard) as exc:
        log.error("run failure: %s", exc)
        return EXIT_RUN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
