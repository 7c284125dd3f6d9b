import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_episode
from gui_fedsim.actions import ActionKind, UnifiedAction
from gui_fedsim.fl import (
    Algo,
    AlgoConfig,
    ClientUpdate,
    DimMismatch,
    EmptyUpdateSet,
    FLError,
    InsufficientClients,
    MissingControlDelta,
    NonFiniteDelta,
    Payload,
    RoundConfig,
    ServerState,
    TrainerFailure,
    TrainHooks,
    Weighting,
    aggregate,
    communication_bytes,
    communication_ledger,
    lora_param_count,
    run,
    run_round,
    sample_size,
    scaffold_server_control,
    server_step,
)
from gui_fedsim.seeding import derive_seed
from gui_fedsim.partition import Axis, PartitionManifest
from gui_fedsim.toy import ToyTrainer, TrainSpec, init_params, param_dim


def scalar_oracle(name, deltas, lr, b1=0.9, b2=0.999, tau=1e-6, mix=0.9):
    """One element at a time, plain python floats."""
    x = m = v = 0.0
    for d in deltas:
        if name in ("FEDAVG", "FEDPROX", "SCAFFOLD"):
            x = x + lr * d
        elif name == "FEDAVGM":
            x = mix * x + (1 - mix) * (x + d)
        elif name == "FEDADAGRAD":
            v = v + d * d
            x = x + lr * d / (math.sqrt(v) + tau)
        elif name == "FEDADAM":
            m = b1 * m + (1 - b1) * d
            v = b2 * v + (1 - b2) * (d * d)
            x = x + lr * m / (math.sqrt(v) + tau)
        elif name == "FEDYOGI":
            m = b1 * m + (1 - b1) * d
            s = v - d * d
            v = v - (1 - b2) * d * d * ((s > 0) - (s < 0))
            x = x + lr * m / (math.sqrt(v) + tau)
    return x, m, v


@pytest.mark.parametrize("algo", list(Algo))
@pytest.mark.parametrize("seed", range(3))
def test_scalar_oracle(algo, seed):
    rng = np.random.default_rng(seed)
    deltas = rng.normal(size=(5, 10))
    state = ServerState(np.zeros(10), AlgoConfig(algo))
    for d in deltas:
        state = server_step(state, d)
    assert state.round == 5
    for j in range(10):
        x, m, v = scalar_oracle(algo.value, deltas[:, j].tolist(), state.algo.lr)
        assert state.params[j] == pytest.approx(x, rel=1e-10, abs=1e-300)
        assert state.momentum[j] == pytest.approx(m, rel=1e-10, abs=1e-300)
        assert state.second_moment[j] == pytest.approx(v, rel=1e-10, abs=1e-300)


def test_unnamed_buffers_stay_zero():
    for algo in (Algo.FEDAVG, Algo.FEDPROX, Algo.SCAFFOLD, Algo.FEDAVGM):
        s = server_step(ServerState(np.zeros(3), AlgoConfig(algo)), np.ones(3))
        assert not s.momentum.any() and not s.second_moment.any()
    s = server_step(ServerState(np.zeros(3), AlgoConfig(Algo.FEDADAGRAD)), np.ones(3))
    assert not s.momentum.any()


def test_server_step_examples():
    s = server_step(ServerState(np.zeros(1)), np.ones(1))
    assert s.params.tolist() == [1.0] and s.round == 1
    adam = server_step(ServerState(np.zeros(1), AlgoConfig(Algo.FEDADAM)), np.ones(1))
    assert adam.momentum[0] == pytest.approx(0.1)
    assert adam.second_moment[0] == pytest.approx(0.001)
    assert adam.params[0] == pytest.approx(3.1622e-3, rel=1e-4)
    yogi = server_step(ServerState(np.zeros(1), AlgoConfig(Algo.FEDYOGI)), np.ones(1))
    assert yogi.params.tolist() == adam.params.tolist()
    assert yogi.momentum.tolist() == adam.momentum.tolist()
    assert yogi.second_moment.tolist() == adam.second_moment.tolist()
    avgm = server_step(ServerState(np.ones(1), AlgoConfig(Algo.FEDAVGM)), np.ones(1))
    assert avgm.params[0] == pytest.approx(1.1)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_yogi_first_step_equals_adam(vals):
    d = np.array(vals)
    a = server_step(ServerState(np.zeros(len(d)), AlgoConfig(Algo.FEDADAM)), d)
    y = server_step(ServerState(np.zeros(len(d)), AlgoConfig(Algo.FEDYOGI)), d)
    assert np.array_equal(a.params, y.params) and np.array_equal(a.second_moment, y.second_moment)


@pytest.mark.parametrize("algo", list(Algo))
def test_configuration_collapse(algo):
    rng = np.random.default_rng(7)
    cfg = AlgoConfig(algo, beta1=0.0, server_lr=1.0, momentum_mix=0.0, tau=1e-300)
    ref = ServerState(np.zeros(10), AlgoConfig(Algo.FEDAVG))
    state = ServerState(np.zeros(10), cfg)
    for _ in range(5):
        d = rng.normal(size=10)
        ref = server_step(ref, d)
        state = server_step(state, d, v_surrogate=1.0)
    assert np.allclose(state.params, ref.params, rtol=0, atol=1e-12)


@given(st.lists(st.lists(st.floats(-10, 10), min_size=4, max_size=4), min_size=1, max_size=6))
def test_adagrad_v_nondecreasing(rows):
    s = ServerState(np.zeros(4), AlgoConfig(Algo.FEDADAGRAD))
    for r in rows:
        prev = s.second_moment.copy()
        s = server_step(s, np.array(r))
        assert np.all(s.second_moment >= prev)


def test_server_step_errors():
    s = ServerState(np.zeros(2))
    with pytest.raises(DimMismatch):
        server_step(s, np.zeros(3))
    with pytest.raises(NonFiniteDelta):
        server_step(s, np.array([np.nan, 0.0]))
    with pytest.raises(FLError):
        AlgoConfig(beta1=1.0)
    with pytest.raises(FLError):
        RoundConfig(data_fraction=0.0)


def test_state_json_roundtrip():
    s = ServerState(np.random.default_rng(0).normal(size=5), AlgoConfig(Algo.FEDYOGI))
    s = server_step(s, np.random.default_rng(1).normal(size=5))
    s.client_controls["client_01"] = np.arange(5.0) / 3
    back = ServerState.from_dict(json.loads(json.dumps(s.to_dict())))
    assert back.to_dict() == s.to_dict()


# aggregation

def upd(delta, n=1, cd=None, cid="c"):
    return ClientUpdate(cid, np.asarray(delta, dtype=float), n, None if cd is None else np.asarray(cd, dtype=float))


def test_aggregate_examples():
    assert aggregate([upd([1.0], 1), upd([3.0], 3)]).tolist() == [2.5]
    assert aggregate([upd([1.0, -2.0], 7)]).tolist() == [1.0, -2.0]
    rng = np.random.default_rng(3)
    deltas = rng.normal(size=(5, 10))
    got = aggregate([upd(d, int(rng.integers(1, 9))) for d in deltas], Weighting.UNIFORM)
    oracle = [math.fsum(deltas[:, j]) / 5 for j in range(10)]
    assert np.allclose(got, oracle, rtol=1e-14, atol=1e-15)
    with pytest.raises(EmptyUpdateSet):
        aggregate([])
    with pytest.raises(DimMismatch):
        aggregate([upd([1.0]), upd([1.0, 2.0])])


vectors = st.lists(st.floats(-100, 100), min_size=3, max_size=3)


@given(st.lists(st.tuples(vectors, st.integers(1, 50)), min_size=1, max_size=6),
       st.floats(-10, 10), st.sampled_from(list(Weighting)), st.randoms())
def test_aggregate_linear_and_order_free(items, k, weighting, rnd):
    ups = [upd(d, n) for d, n in items]
    base = aggregate(ups, weighting)
    scaled = aggregate([upd(k * np.array(d), n) for d, n in items], weighting)
    assert np.allclose(scaled, k * base, rtol=1e-9, atol=1e-9)
    shuffled = list(ups)
    rnd.shuffle(shuffled)
    assert np.allclose(aggregate(shuffled, weighting), base, rtol=1e-12, atol=1e-12)


# SCAFFOLD server variate

def scaffold_state(c=0.0):
    return ServerState(np.zeros(1), AlgoConfig(Algo.SCAFFOLD), control=np.array([c]))


def test_scaffold_control_examples():
    zero = scaffold_server_control(scaffold_state(0.5), [upd([0], cd=[0]), upd([0], cd=[0])], 4)
    assert zero.control.tolist() == [0.5]
    s = scaffold_server_control(scaffold_state(), [upd([0], cd=[3]), upd([0], cd=[0]), upd([0], cd=[0])], 3)
    assert s.control.tolist() == [1.0]
    s = scaffold_server_control(scaffold_state(), [upd([0], cd=[2])] * 3, 6)
    assert s.control.tolist() == [1.0]
    with pytest.raises(MissingControlDelta):
        scaffold_server_control(scaffold_state(), [upd([0])], 3)
    with pytest.raises(FLError):
        scaffold_server_control(ServerState(np.zeros(1)), [upd([0], cd=[0])], 3)


# round protocol

def corpus_and_manifest(num_clients=15, per_client=40):
    action = [UnifiedAction(ActionKind.CLICK, point=(5, 5)), UnifiedAction(ActionKind.COMPLETE)]
    shards, corpus = {}, {}
    for k in range(num_clients):
        ids = []
        for i in range(per_client):
            e = make_episode(f"e{k:02d}-{i:03d}", action, instruction=f"tap item {i}")
            corpus[e.episode_id] = e
            ids.append(e.episode_id)
        shards[f"client_{k:02d}"] = tuple(ids)
    labels = {"PLATFORM": {e: "MOBILE" for e in corpus}}
    return corpus, PartitionManifest(Axis.PLATFORM, shards, labels)


class CountingTrainer:
    def __init__(self):
        self.calls = []

    def __call__(self, params, sample, hooks, seed):
        self.calls.append((len(sample), hooks))
        return ClientUpdate("", np.ones_like(params), len(sample),
                            np.zeros_like(params) if hooks.scaffold_c is not None else None)


def test_sample_size_exact_ceiling():
    assert sample_size(40, 0.1) == 4
    assert sample_size(30, 0.1) == 3
    assert sample_size(31, 0.1) == 4
    assert sample_size(5, 1.0) == 5
    assert sample_size(1, 0.1) == 1


def test_default_round_protocol():
    corpus, manifest = corpus_and_manifest()
    state, logs = run(ServerState(np.zeros(4)), manifest, corpus, CountingTrainer(), RoundConfig(seed=9))
    assert len(logs) == 30 and state.round == 30
    for i, log in enumerate(logs, start=1):
        assert log.round == i
        assert len(set(log.selected_clients)) == 3
        assert log.samples_per_client == (4, 4, 4)
        assert log.payload_bytes == 3 * 4 * 8


def test_rounds_are_deterministic_and_vary():
    corpus, manifest = corpus_and_manifest()
    rc = RoundConfig(total_rounds=5, seed=4)
    _, a = run(ServerState(np.zeros(4)), manifest, corpus, CountingTrainer(), rc)
    _, b = run(ServerState(np.zeros(4)), manifest, corpus, CountingTrainer(), rc)
    dump = lambda logs: [json.dumps(l.to_dict(timing=False)) for l in logs]  # noqa: E731
    assert dump(a) == dump(b)
    assert len({l.selected_clients for l in a}) > 1


def test_full_participation_is_one_synchronous_pass():
    corpus, manifest = corpus_and_manifest(num_clients=4, per_client=5)
    trainer = ToyTrainer(TrainSpec(client_lr=0.1, feature_dim=8))
    rc = RoundConfig(total_rounds=1, clients_per_round=4, data_fraction=1.0, seed=1)
    state, (log,) = run(ServerState(init_params(8)), manifest, corpus, trainer, rc)
    assert log.samples_per_client == (5, 5, 5, 5)
    ups = [trainer(init_params(8), [corpus[e] for e in manifest.shards[c]], TrainHooks(),
                   derive_seed(1, "train", 0, c)) for c in manifest.client_ids]
    assert np.array_equal(state.params, aggregate(ups))


def test_hooks_follow_algorithm():
    corpus, manifest = corpus_and_manifest(num_clients=3, per_client=10)
    rc = RoundConfig(total_rounds=1)
    t = CountingTrainer()
    run_round(ServerState(np.zeros(2), AlgoConfig(Algo.FEDPROX)), manifest, corpus, t, rc)
    assert all(h.prox_mu == 0.2 and h.scaffold_c is None for _, h in t.calls)
    t = CountingTrainer()
    s, log = run_round(ServerState(np.zeros(2), AlgoConfig(Algo.SCAFFOLD)), manifest, corpus, t, rc)
    assert all(h.scaffold_c is not None and h.prox_mu is None for _, h in t.calls)
    assert set(s.client_controls) == set(manifest.client_ids)
    assert log.payload_bytes == 2 * 3 * 2 * 8


def test_round_errors():
    corpus, manifest = corpus_and_manifest(num_clients=2, per_client=3)
    with pytest.raises(InsufficientClients):
        run_round(ServerState(np.zeros(2)), manifest, corpus, CountingTrainer(), RoundConfig())

    def broken(*_):
        raise RuntimeError("boom")

    corpus, manifest = corpus_and_manifest(num_clients=3, per_client=3)
    with pytest.raises(TrainerFailure) as info:
        run_round(ServerState(np.zeros(2)), manifest, corpus, broken, RoundConfig())
    assert info.value.client_id.startswith("client_")


def test_resume_matches_uninterrupted():
    corpus, manifest = corpus_and_manifest(num_clients=6, per_client=20)
    trainer = ToyTrainer(TrainSpec(client_lr=0.05, feature_dim=8))
    rc = RoundConfig(total_rounds=6, seed=2)
    algo = AlgoConfig(Algo.SCAFFOLD)
    full, _ = run(ServerState(init_params(8), algo), manifest, corpus, trainer, rc)
    half, _ = run(ServerState(init_params(8), algo), manifest, corpus, trainer, replace(rc, total_rounds=3))
    restored = ServerState.from_dict(json.loads(json.dumps(half.to_dict())))
    resumed, logs = run(restored, manifest, corpus, trainer, rc)
    assert [l.round for l in logs] == [4, 5, 6]
    assert resumed.to_dict() == full.to_dict()


# communication

def test_communication_bytes():
    assert communication_bytes(1000, 4) == 4000
    assert communication_bytes(1000, 4, Payload.ADAPTER, 0) == 0
    assert communication_bytes(param_dim(64), 8) == 8840
    with pytest.raises(FLError):
        communication_bytes(10, 3)


def test_lora_count_and_ledger():
    assert lora_param_count([(4096, 4096)], 8) == 8 * 8192
    led = communication_ledger(1_000_000, 9_000, rounds=30, clients_per_round=3, bytes_per_param=2)
    assert led["full_bytes_per_client_round"] == 2_000_000
    assert led["adapter_bytes_per_client_round"] == 18_000
    assert led["full_bytes_total"] == 2_000_000 * 90
    assert led["adapter_bytes_total"] == 18_000 * 90
    assert led["adapter_to_full_ratio"] < 0.01
