"""Desk-scale federated experiments on synthetic corpora."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import toy
from .fl import AlgoConfig, RoundConfig, ServerState, run
from .metrics import evaluate
from .partition import PartitionManifest, PartitionSpec, partition
from .seeding import derive_seed


@dataclass(frozen=True)
class TrendSetup:
    """One synthetic corpus, one partition, one server rule.

    Defaults are the heterogeneity-trend setup: 3 platforms, separation
    4.0, 15 clients, client step size picked on held-out seeds.
    """

    synth: toy.SynthSpec = field(default_factory=lambda: toy.SynthSpec(
        num_values=3, episodes_per_value=1000, separation=4.0))
    scheme: str = "SKEW"
    num_clients: int = 15
    test_per_value: int = 100
    trainer: toy.TrainSpec = field(default_factory=lambda: toy.TrainSpec(local_epochs=3, client_lr=0.03))
    algo: AlgoConfig = field(default_factory=AlgoConfig)
    rounds: RoundConfig = field(default_factory=RoundConfig)


def split_by_index(episodes: Sequence, test_per_value: int):
    """First ``test_per_value`` episodes of every value are held out."""
    test = [e for e in episodes if int(e.episode_id.rsplit("-", 1)[1]) < test_per_value]
    train = [e for e in episodes if int(e.episode_id.rsplit("-", 1)[1]) >= test_per_value]
    return test, train


def restrict(manifest: PartitionManifest, value: str) -> PartitionManifest:
    """Keep only the clients whose shards hold nothing but ``value``."""
    labels = manifest.labels[manifest.axis.value]
    shards = {c: s for c, s in manifest.shards.items() if s and all(labels[e] == value for e in s)}
    return PartitionManifest(axis=manifest.axis, shards=shards, labels=manifest.labels)


def sr_proxy(params: np.ndarray, episodes: Sequence, feature_dim: int) -> float:
    from .cli import toy_predictions

    if not episodes:
        return 0.0
    return evaluate(toy_predictions(params, episodes, feature_dim), episodes)["ALL"].sr


@dataclass
class TrendResult:
    params: np.ndarray
    per_value: dict[str, float]

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_value.values())))


def run_setup(setup: TrendSetup, seed: int, only_value: str | None = None) -> TrendResult:
    """Train from zero and score SR-proxy per value on the held-out episodes."""
    synth = replace(setup.synth, seed=seed)
    episodes = toy.gen_synthetic(synth)
    test, train = split_by_index(episodes, setup.test_per_value)
    axis = synth.axis
    manifest = partition(train, PartitionSpec(axis, setup.scheme, setup.num_clients,
                                              seed=derive_seed(seed, "partition") % (1 << 32)))
    if only_value is not None:
        manifest = restrict(manifest, only_value)
    corpus = {e.episode_id: e for e in train}
    state = ServerState(toy.init_params(setup.trainer.feature_dim), algo=setup.algo)
    rc = replace(setup.rounds, seed=derive_seed(seed, "rounds") % (1 << 32))
    state, _ = run(state, manifest, corpus, toy.ToyTrainer(setup.trainer), rc)
    values = toy.synth_values(synth)
    per_value = {v: sr_proxy(state.params, [e for e in test if e.tag.value(axis) == v],
                             setup.trainer.feature_dim) for v in values}
    return TrendResult(state.params, per_value)
