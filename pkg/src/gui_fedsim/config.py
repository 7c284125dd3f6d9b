"""Run configuration: one JSON document, fully defaulted."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

from .fileio import dumps, sha256_text
from .fl import AlgoConfig, RoundConfig
from .partition import FullVariant, PartitionSpec
from .seeding import derive_seed
from .toy import SynthSpec, TrainSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FullPartition:
    """A platform-then-source variant over a multi-platform corpus."""

    variant: FullVariant
    num_clients: int = 9
    alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "variant", FullVariant(self.variant))

    def to_dict(self) -> dict:
        return {"variant": self.variant.value, "num_clients": self.num_clients, "alpha": self.alpha}


DEFAULT_PARTITION = {"axis": "PLATFORM", "scheme": "IID", "num_clients": 15}


@dataclass(frozen=True)
class RunConfig:
    corpus_path: str | None = None
    partition: PartitionSpec | FullPartition = field(
        default_factory=lambda: PartitionSpec(**DEFAULT_PARTITION))
    round: RoundConfig = field(default_factory=RoundConfig)
    algo: AlgoConfig = field(default_factory=AlgoConfig)
    trainer: TrainSpec = field(default_factory=TrainSpec)
    synth: SynthSpec | None = None
    out_dir: str = "run"
    master_seed: int = 0
    test_per_source: int = 100
    image_root: str | None = None
    lora_rank: int = 8
    record_wall_time: bool = False

    def to_dict(self) -> dict:
        return {
            "corpus_path": self.corpus_path,
            "partition": self.partition.to_dict(),
            "round": self.round.to_dict(),
            "algo": self.algo.to_dict(),
            "trainer": self.trainer.to_dict(),
            "synth": self.synth.to_dict() if self.synth else None,
            "out_dir": self.out_dir,
            "master_seed": self.master_seed,
            "test_per_source": self.test_per_source,
            "image_root": self.image_root,
            "lora_rank": self.lora_rank,
            "record_wall_time": self.record_wall_time,
        }

    @property
    def hash(self) -> str:
        """Digest of the resolved config, output location excluded."""
        d = self.to_dict()
        d.pop("out_dir")
        return sha256_text(dumps(d))[:16]

    @property
    def corpus_file(self) -> Path:
        if self.corpus_path:
            return Path(self.corpus_path)
        return Path(self.out_dir) / "corpus.jsonl"

    def with_seed(self, seed: int) -> "RunConfig":
        return resolve(replace(self, master_seed=seed))


def _sub_seed(master: int, label: str) -> int:
    return derive_seed(master, label) % (1 << 32)


def resolve(cfg: RunConfig) -> RunConfig:
    """Overwrite every component seed with one derived from ``master_seed``."""
    m = cfg.master_seed
    part = cfg.partition
    if isinstance(part, PartitionSpec):
        part = replace(part, seed=_sub_seed(m, "partition"))
    synth = replace(cfg.synth, seed=_sub_seed(m, "synth")) if cfg.synth else None
    return replace(cfg, partition=part, synth=synth,
                   round=replace(cfg.round, seed=_sub_seed(m, "rounds")))


def _build(kind, d, where: str):
    if not isinstance(d, Mapping):
        raise ConfigError(f"{where} must be an object")
    try:
        return kind.from_dict(d) if hasattr(kind, "from_dict") else kind(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_TOP = {"corpus_path", "partition", "round", "algo", "trainer", "synth", "out_dir", "master_seed",
        "test_per_source", "image_root", "lora_rank", "record_wall_time"}


def config_from_dict(d: Mapping) -> RunConfig:
    unknown = set(d) - _TOP
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw: dict = {k: d[k] for k in ("corpus_path", "out_dir", "image_root") if d.get(k) is not None}
    for k in ("master_seed", "test_per_source", "lora_rank"):
        if k in d:
            if not isinstance(d[k], int) or isinstance(d[k], bool) or d[k] < 0:
                raise ConfigError(f"{k} must be a nonnegative integer")
            kw[k] = d[k]
    if "record_wall_time" in d:
        kw["record_wall_time"] = bool(d["record_wall_time"])
    if "partition" in d:
        p = d["partition"]
        if isinstance(p, Mapping) and "variant" in p:
            kw["partition"] = _build(FullPartition, p, "partition")
        else:
            kw["partition"] = _build(PartitionSpec, {**DEFAULT_PARTITION, **p}, "partition")
    for key, kind in (("round", RoundConfig), ("algo", AlgoConfig), ("trainer", TrainSpec)):
        if key in d:
            kw[key] = _build(kind, d[key], key)
    if d.get("synth") is not None:
        kw["synth"] = _build(SynthSpec, d["synth"], "synth")
    return resolve(RunConfig(**kw))


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(d)
