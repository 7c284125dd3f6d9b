"""Acceptance suite: one test per criterion, measured values attached as
user properties and echoed in the terminal summary."""
import hashlib
import json
import math
import time
from dataclasses import replace
from functools import lru_cache

import numpy as np
import pytest

from conftest import make_episode
from gui_fedsim.actions import (
    ACTION_KINDS,
    COORD_MAX,
    DIRECTIONS,
    DIRECTION_KINDS,
    POINT_KINDS,
    TEXT_KINDS,
    ActionKind,
    UnifiedAction,
    parse_action,
    serialize_action,
)
from gui_fedsim.cli import EXIT_OK, main
from gui_fedsim.experiments import TrendSetup, run_setup
from gui_fedsim.fl import (
    Algo,
    AlgoConfig,
    Payload,
    RoundConfig,
    ServerState,
    communication_bytes,
    communication_ledger,
    run,
    server_step,
)
from gui_fedsim.metrics import grounding_hit, similarity, step_success, type_match
from gui_fedsim.partition import Axis, PartitionSpec, Scheme, heterogeneity, partition, partition_stats
from gui_fedsim import toy

SEEDS = range(5)


# 1 ---------------------------------------------------------------------------

def oracle(name, deltas, lr, b1=0.9, b2=0.999, tau=1e-6, mix=0.9):
    x = m = v = 0.0
    for d in deltas:
        if name == "FEDAVGM":
            x = mix * x + (1 - mix) * (x + d)
        elif name == "FEDADAGRAD":
            v += d * d
            x += lr * d / (math.sqrt(v) + tau)
        elif name in ("FEDADAM", "FEDYOGI"):
            m = b1 * m + (1 - b1) * d
            if name == "FEDADAM":
                v = b2 * v + (1 - b2) * (d * d)
            else:
                v = v - (1 - b2) * (d * d) * math.copysign(1.0, v - d * d) * (v != d * d)
            x += lr * m / (math.sqrt(v) + tau)
        else:
            x += lr * d
    return x


def test_criterion_1_optimizer_oracle(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(2024)
    for algo in Algo:
        deltas = rng.normal(size=(5, 10))
        s = ServerState(np.zeros(10), AlgoConfig(algo))
        for d in deltas:
            s = server_step(s, d)
        for j in range(10):
            want = oracle(algo.value, deltas[:, j].tolist(), s.algo.lr)
            worst = max(worst, abs(s.params[j] - want) / max(abs(want), 1e-300))
    d = rng.normal(size=10)
    adam = server_step(ServerState(np.zeros(10), AlgoConfig(Algo.FEDADAM)), d)
    yogi = server_step(ServerState(np.zeros(10), AlgoConfig(Algo.FEDYOGI)), d)
    same = all(np.array_equal(getattr(adam, b), getattr(yogi, b)) for b in ("params", "momentum", "second_moment"))
    elapsed = time.perf_counter() - t0
    record_property("result", f"max rel err {worst:.2e}, yogi==adam first step {same}, {elapsed:.3f}s")
    assert worst <= 1e-10 and same and elapsed < 1.0


# 2 ---------------------------------------------------------------------------

def test_criterion_2_protocol_constants(record_property):
    t0 = time.perf_counter()
    synth = toy.SynthSpec(num_values=3, episodes_per_value=300, separation=4.0)
    eps = toy.gen_synthetic(synth)
    manifest = partition(eps, PartitionSpec(Axis.PLATFORM, Scheme.IID, 15))
    corpus = {e.episode_id: e for e in eps}
    rc = RoundConfig()
    state, logs = run(ServerState(toy.init_params()), manifest, corpus, toy.ToyTrainer(toy.TrainSpec()), rc)
    elapsed = time.perf_counter() - t0
    assert (rc.total_rounds, rc.clients_per_round, rc.data_fraction) == (30, 3, 0.10)
    ok = len(logs) == 30 and state.round == 30
    for log in logs:
        ok &= len(log.selected_clients) == 3 == len(set(log.selected_clients))
        # ceil(n / 10) in integers
        ok &= list(log.samples_per_client) == [-(-len(manifest.shards[c]) // 10) for c in log.selected_clients]
    record_property("result", f"{len(logs)} rounds, 3 distinct clients each, ceil samples {ok}, {elapsed:.2f}s")
    assert ok and elapsed < 10.0


# 3 ---------------------------------------------------------------------------

def random_action(rng):
    kind = ACTION_KINDS[int(rng.integers(len(ACTION_KINDS)))]
    if kind in POINT_KINDS:
        return UnifiedAction(kind, point=(int(rng.integers(COORD_MAX + 1)), int(rng.integers(COORD_MAX + 1))))
    if kind in DIRECTION_KINDS:
        return UnifiedAction(kind, direction=DIRECTIONS[int(rng.integers(4))])
    if kind in TEXT_KINDS:
        pool = "ab cd]e[f 上海 x<y>z,+ENTERctrlalt"
        return UnifiedAction(kind, text="".join(pool[i] for i in rng.integers(len(pool), size=int(rng.integers(12)))))
    return UnifiedAction(kind)


def test_criterion_3_metric_boundaries(record_property):
    diag = math.hypot(COORD_MAX, COORD_MAX)
    edge = grounding_hit((0.14 * diag, 0.0), (0.0, 0.0))
    past = grounding_hit((0.1400001 * diag, 0.0), (0.0, 0.0))
    half = similarity("a c", "a b")
    strict = half == 0.5 and not step_success("TYPE [a c]", UnifiedAction(ActionKind.TYPE, text="a b"))
    above = step_success("TYPE [a b c]", UnifiedAction(ActionKind.TYPE, text="a b"))
    rng = np.random.default_rng(3)
    violations = 0
    for _ in range(1000):
        gold = random_action(rng)
        r = rng.random()
        pred = serialize_action(gold) if r < 0.3 else serialize_action(random_action(rng)) if r < 0.9 else "NOISE"
        if step_success(pred, gold) and not type_match(pred, gold):
            violations += 1
    record_property("result", f"hit at 0.14d {edge}, miss at 0.1400001d {not past}, "
                              f"0.5 fails {strict}, 0.8 passes {above}, SR>Type violations {violations}/1000")
    assert edge and not past and strict and above and violations == 0


# 4 ---------------------------------------------------------------------------

def value_corpus(n_values, per_value):
    step = [UnifiedAction(ActionKind.CLICK, point=(1, 1))]
    return [make_episode(f"go-{v}-{i:04d}", step, source="GO", device=f"device-{v}")
            for v in range(n_values) for i in range(per_value)]


def mean_chi2(eps, clients, excluded):
    out = {}
    for scheme in Scheme:
        out[scheme] = float(np.mean([heterogeneity(partition(eps, PartitionSpec(
            Axis.DEVICE, scheme, clients, excluded_per_client=excluded, seed=s))) for s in range(20)]))
    return out


def test_criterion_4_partition_properties(record_property):
    eps = value_corpus(5, 500)
    skew = partition(eps, PartitionSpec(Axis.DEVICE, Scheme.SKEW, 5))
    purity = all(sum(1 for r in partition_stats(skew) if r.client_id == c and r.count) == 1 for c in skew.client_ids)
    part = partition(eps, PartitionSpec(Axis.DEVICE, Scheme.PARTIAL, 5, excluded_per_client=1))
    zeros = all(sum(1 for r in partition_stats(part, dense=True) if r.client_id == c and r.count == 0) == 1
                for c in part.client_ids)
    iid = partition(eps, PartitionSpec(Axis.DEVICE, Scheme.IID, 5, seed=7))
    drift = max(abs(r.proportion - 0.2) for r in partition_stats(iid, dense=True))
    orders = []
    for n_values, excluded in ((3, 1), (5, 2)):
        c = mean_chi2(value_corpus(n_values, 500), 5, excluded)
        orders.append(c[Scheme.IID] <= c[Scheme.NON_UNIFORM] <= c[Scheme.PARTIAL] <= c[Scheme.SKEW])
        record_property(f"chi2_V{n_values}", {k.value: round(v, 3) for k, v in c.items()})
    record_property("result", f"purity {purity}, partial zeros {zeros}, IID max drift {drift:.4f}, "
                              f"chi2 ordering {orders}")
    assert purity and zeros and drift <= 0.02 and all(orders)


# 5 and 6 ----------------------------------------------------------------------

@lru_cache(maxsize=None)
def trend(scheme="SKEW", algo=Algo.FEDAVG, only=None):
    setup = TrendSetup(scheme=scheme, algo=AlgoConfig(algo))
    return [run_setup(setup, s, only).per_value for s in SEEDS]


def mean_over(results, values=None):
    return 100 * float(np.mean([np.mean([r[v] for v in (values or r)]) for r in results]))


def test_criterion_5_heterogeneity_trend(record_property):
    t0 = time.perf_counter()
    iid = mean_over(trend("IID"))
    skew = mean_over(trend("SKEW"))
    gaps = []
    values = toy.synth_values(TrendSetup().synth)
    for only in values:
        unseen = [v for v in values if v != only]
        gaps.append(mean_over(trend("SKEW"), unseen) - mean_over(trend("SKEW", only=only), unseen))
    elapsed = time.perf_counter() - t0
    record_property("result", f"IID {iid:.2f} vs Skew {skew:.2f} (need +3.00); "
                              f"salvage gaps {[round(g, 2) for g in gaps]} (need >= 15); {elapsed:.0f}s")
    assert iid - skew >= 3.0 and min(gaps) >= 15.0 and elapsed < 300


def test_criterion_6_adaptive_advantage(record_property):
    avg = mean_over(trend("SKEW", Algo.FEDAVG))
    yogi = mean_over(trend("SKEW", Algo.FEDYOGI))
    adam = mean_over(trend("SKEW", Algo.FEDADAM))
    record_property("result", f"FedYogi {yogi:.2f}, FedAdam {adam:.2f}, FedAvg {avg:.2f} (Skew, 5 seeds)")
    tie = abs(yogi - avg) <= 0.5 and adam >= avg - 0.5
    assert yogi >= avg or tie


# 7 ---------------------------------------------------------------------------

def test_criterion_7_communication_ledger(record_property):
    dim, adapter, bpp = 7_000_000, 69_999, 4
    assert adapter / dim < 0.01
    led = communication_ledger(dim, adapter, rounds=30, clients_per_round=3, bytes_per_param=bpp)
    hand = {
        "full_bytes_per_client_round": 28_000_000,
        "adapter_bytes_per_client_round": 279_996,
        "full_bytes_total": 28_000_000 * 90,
        "adapter_bytes_total": 279_996 * 90,
    }
    exact = all(led[k] == v for k, v in hand.items())
    ratio = communication_bytes(dim, bpp, Payload.ADAPTER, adapter) / communication_bytes(dim, bpp, Payload.FULL)
    record_property("result", f"adapter/full {ratio:.7f}, hand arithmetic exact {exact}")
    assert ratio < 0.01 and exact


# 8 ---------------------------------------------------------------------------

def test_criterion_8_roundtrip_and_determinism(tmp_path, record_property):
    rng = np.random.default_rng(8)
    failures = 0
    for _ in range(10_000):
        a = random_action(rng)
        try:
            if parse_action(serialize_action(a)) != a:
                failures += 1
        except Exception:
            failures += 1
    cfg = {"synth": {"num_values": 3, "episodes_per_value": 80, "separation": 4.0},
           "partition": {"axis": "PLATFORM", "scheme": "SKEW", "num_clients": 6},
           "round": {"total_rounds": 8}, "trainer": {"client_lr": 0.03}, "test_per_source": 30,
           "master_seed": 11}
    digests = []
    for name in ("first", "second"):
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps({**cfg, "out_dir": str(tmp_path / name)}))
        for stage in ("synth", "partition", "train", "evaluate"):
            assert main([stage, "--config", str(path)]) == EXIT_OK
        digests.append(tuple(hashlib.sha256((tmp_path / name / f).read_bytes()).hexdigest()
                             for f in ("report.json", "report.csv")))
    record_property("result", f"round-trip failures {failures}/10000, reports identical {digests[0] == digests[1]}")
    assert failures == 0 and digests[0] == digests[1]
