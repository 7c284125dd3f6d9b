"""Server-side federated optimization and the round protocol.

Parameter vectors are flat float64 numpy arrays. Server rules, all
element-wise, with aggregated client delta ``D``:

    FEDAVG, FEDPROX, SCAFFOLD   x += lr * D                       (lr = 1.0)
    FEDAVGM                     x = mix * x + (1 - mix) * (x + D)
    FEDADAGRAD                  v += D^2;                          x += lr * D / (sqrt(v) + tau)
    FEDADAM                     m = b1 m + (1-b1) D; v = b2 v + (1-b2) D^2;          x += lr * m / (sqrt(v) + tau)
    FEDYOGI                     m = b1 m + (1-b1) D; v -= (1-b2) D^2 sign(v - D^2);  x += lr * m / (sqrt(v) + tau)
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from . import kernels
from .episodes import Episode
from .partition import PartitionManifest
from .seeding import derive_seed, rng_for


class FLError(ValueError):
    pass


class DimMismatch(FLError):
    pass


class EmptyUpdateSet(FLError):
    pass


class NonFiniteDelta(FLError):
    pass


class MissingControlDelta(FLError):
    pass


class InsufficientClients(FLError):
    pass


class TrainerFailure(RuntimeError):
    def __init__(self, client_id: str, cause: BaseException):
        super().__init__(f"client {client_id}: {cause!r}")
        self.client_id = client_id


class Algo(str, Enum):
    FEDAVG = "FEDAVG"
    FEDPROX = "FEDPROX"
    SCAFFOLD = "SCAFFOLD"
    FEDAVGM = "FEDAVGM"
    FEDADAM = "FEDADAM"
    FEDYOGI = "FEDYOGI"
    FEDADAGRAD = "FEDADAGRAD"


ADAPTIVE = frozenset({Algo.FEDADAM, Algo.FEDYOGI, Algo.FEDADAGRAD})


class Weighting(str, Enum):
    BY_SAMPLES = "BY_SAMPLES"
    UNIFORM = "UNIFORM"


@dataclass(frozen=True)
class AlgoConfig:
    name: Algo = Algo.FEDAVG
    beta1: float = 0.9
    beta2: float = 0.999
    server_lr: float | None = None  # None: 1e-3 for the adaptive family, 1.0 otherwise
    tau: float = 1e-6
    mu: float = 0.2
    momentum_mix: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "name", Algo(self.name))
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise FLError("beta1, beta2 must lie in [0, 1)")
        if self.server_lr is not None and not self.server_lr > 0:
            raise FLError("server_lr must be positive")
        if not self.tau > 0:
            raise FLError("tau must be positive")
        if self.mu < 0:
            raise FLError("mu must be nonnegative")
        if not 0 <= self.momentum_mix <= 1:
            raise FLError("momentum_mix must lie in [0, 1]")

    @property
    def lr(self) -> float:
        if self.server_lr is not None:
            return self.server_lr
        return 1e-3 if self.name in ADAPTIVE else 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["name"] = self.name.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "AlgoConfig":
        return cls(**d)


@dataclass(frozen=True)
class RoundConfig:
    total_rounds: int = 30
    clients_per_round: int = 3
    data_fraction: float = 0.10
    seed: int = 0
    weighting: Weighting = Weighting.BY_SAMPLES
    bytes_per_param: int = 8

    def __post_init__(self):
        object.__setattr__(self, "weighting", Weighting(self.weighting))
        if not 0 < self.data_fraction <= 1:
            raise FLError("data_fraction must lie in (0, 1]")
        if self.clients_per_round < 1:
            raise FLError("clients_per_round must be at least 1")
        if self.total_rounds < 0:
            raise FLError("total_rounds must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weighting"] = self.weighting.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RoundConfig":
        return cls(**d)


@dataclass
class ClientUpdate:
    client_id: str
    delta: np.ndarray
    num_samples: int
    control_delta: np.ndarray | None = None


@dataclass
class ServerState:
    """Global model plus every server buffer.

    ``client_controls`` holds each client's SCAFFOLD variate. It lives
    client-side in a real deployment; the simulator keeps it here so that a
    checkpoint is enough for exact resume.
    """

    params: np.ndarray
    algo: AlgoConfig = field(default_factory=AlgoConfig)
    round: int = 0
    momentum: np.ndarray | None = None
    second_moment: np.ndarray | None = None
    control: np.ndarray | None = None
    client_controls: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        zeros = lambda: np.zeros_like(self.params)  # noqa: E731
        self.momentum = zeros() if self.momentum is None else np.asarray(self.momentum, dtype=np.float64)
        self.second_moment = zeros() if self.second_moment is None else np.asarray(self.second_moment, dtype=np.float64)
        self.control = zeros() if self.control is None else np.asarray(self.control, dtype=np.float64)
        for buf in (self.momentum, self.second_moment, self.control):
            if buf.shape != self.params.shape:
                raise DimMismatch("server buffers must match params")

    @property
    def dim(self) -> int:
        return self.params.shape[0]

    def to_dict(self) -> dict:
        # repr-exact floats: json round-trips IEEE doubles losslessly
        return {
            "round": self.round,
            "algo": self.algo.to_dict(),
            "params": self.params.tolist(),
            "momentum": self.momentum.tolist(),
            "second_moment": self.second_moment.tolist(),
            "control": self.control.tolist(),
            "client_controls": {c: v.tolist() for c, v in sorted(self.client_controls.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ServerState":
        return cls(
            params=np.array(d["params"], dtype=np.float64),
            algo=AlgoConfig.from_dict(d["algo"]),
            round=int(d["round"]),
            momentum=np.array(d["momentum"], dtype=np.float64),
            second_moment=np.array(d["second_moment"], dtype=np.float64),
            control=np.array(d["control"], dtype=np.float64),
            client_controls={c: np.array(v, dtype=np.float64) for c, v in d.get("client_controls", {}).items()},
        )


def aggregate(updates: Sequence[ClientUpdate], weighting=Weighting.BY_SAMPLES) -> np.ndarray:
    if not updates:
        raise EmptyUpdateSet("no client updates to aggregate")
    dim = updates[0].delta.shape[0]
    if any(u.delta.shape != (dim,) for u in updates):
        raise DimMismatch("client deltas differ in dimension")
    if Weighting(weighting) is Weighting.BY_SAMPLES:
        w = np.array([u.num_samples for u in updates], dtype=np.float64)
    else:
        w = np.ones(len(updates))
    w = w / w.sum()
    deltas = np.stack([np.asarray(u.delta, dtype=np.float64) for u in updates])
    out = kernels.weighted_sum(deltas, w)
    if not np.all(np.isfinite(out)):
        raise NonFiniteDelta("aggregate is not finite")
    return out


def server_step(state: ServerState, agg_delta: np.ndarray, v_surrogate: float | None = None) -> ServerState:
    """Apply one server update; returns a new state at ``round + 1``.

    ``v_surrogate`` replaces the adaptive denominator's second moment by a
    constant. It exists for reduction checks and is never used in training.
    """
    delta = np.asarray(agg_delta, dtype=np.float64)
    if delta.shape != state.params.shape:
        raise DimMismatch(f"delta dim {delta.shape} vs state dim {state.params.shape}")
    if not np.all(np.isfinite(delta)):
        raise NonFiniteDelta("aggregated delta is not finite")
    cfg = state.algo
    x, m, v = state.params, state.momentum, state.second_moment
    lr, tau = cfg.lr, cfg.tau

    if cfg.name in (Algo.FEDAVG, Algo.FEDPROX, Algo.SCAFFOLD):
        x = x + lr * delta
    elif cfg.name is Algo.FEDAVGM:
        x = cfg.momentum_mix * x + (1.0 - cfg.momentum_mix) * (x + delta)
    elif v_surrogate is not None:
        if cfg.name is Algo.FEDADAGRAD:
            step = delta
        else:
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * delta
            step = m
        x = x + lr * step / (math.sqrt(v_surrogate) + tau)
    elif cfg.name is Algo.FEDADAGRAD:
        x, v = kernels.adagrad(x, v, delta, lr, tau)
    elif cfg.name is Algo.FEDADAM:
        x, m, v = kernels.adam(x, m, v, delta, cfg.beta1, cfg.beta2, lr, tau)
    elif cfg.name is Algo.FEDYOGI:
        x, m, v = kernels.yogi(x, m, v, delta, cfg.beta1, cfg.beta2, lr, tau)

    return replace(state, params=x, momentum=m, second_moment=v, round=state.round + 1,
                   control=state.control.copy(), client_controls=dict(state.client_controls))


def scaffold_server_control(state: ServerState, updates: Sequence[ClientUpdate],
                            num_total_clients: int) -> ServerState:
    """c += (|S| / N) * mean of participating clients' control deltas."""
    if state.algo.name is not Algo.SCAFFOLD:
        raise FLError("server control variate only exists for SCAFFOLD")
    if not updates:
        raise EmptyUpdateSet("no client updates")
    if any(u.control_delta is None for u in updates):
        raise MissingControlDelta("every SCAFFOLD update needs a control delta")
    mean = np.mean(np.stack([u.control_delta for u in updates]), axis=0)
    c = state.control + (len(updates) / num_total_clients) * mean
    return replace(state, control=c)


# ---------------------------------------------------------------------------
# round protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainHooks:
    """Algorithm-specific extras handed to a local trainer."""

    prox_mu: float | None = None
    prox_anchor: np.ndarray | None = None
    scaffold_c: np.ndarray | None = None
    scaffold_c_i: np.ndarray | None = None


class LocalTrainer(Protocol):
    def __call__(self, global_params: np.ndarray, shard_sample: Sequence[Episode],
                 hooks: TrainHooks, seed: int) -> ClientUpdate: ...


@dataclass(frozen=True)
class RoundLog:
    round: int
    selected_clients: tuple[str, ...]
    samples_per_client: tuple[int, ...]
    payload_bytes: int
    delta_l2: float
    wall_time_ms: float = 0.0

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "round": self.round,
            "selected_clients": list(self.selected_clients),
            "samples_per_client": list(self.samples_per_client),
            "payload_bytes": self.payload_bytes,
            "delta_l2": self.delta_l2,
        }
        if timing:
            d["wall_time_ms"] = self.wall_time_ms
        return d


def sample_size(n: int, fraction: float) -> int:
    """ceil(fraction * n) in exact arithmetic (0.1 * 30 is 3, not 4)."""
    f = Fraction(fraction).limit_denominator(10**9)
    return min(n, -((-f.numerator * n) // f.denominator))


def select_clients(manifest: PartitionManifest, k: int, seed: int, round_index: int) -> list[str]:
    eligible = [c for c in manifest.client_ids if manifest.shards[c]]
    if len(eligible) < k:
        raise InsufficientClients(f"{k} clients per round, {len(eligible)} non-empty shards")
    pick = rng_for(seed, "clients", round_index).choice(len(eligible), size=k, replace=False)
    return [eligible[i] for i in sorted(pick)]


def run_round(state: ServerState, manifest: PartitionManifest, corpus: Mapping[str, Episode],
              trainer: LocalTrainer, rc: RoundConfig) -> tuple[ServerState, RoundLog]:
    t0 = time.perf_counter()
    t = state.round
    selected = select_clients(manifest, rc.clients_per_round, rc.seed, t)
    algo = state.algo.name
    updates, sizes = [], []
    for cid in selected:
        shard = manifest.shards[cid]
        k = sample_size(len(shard), rc.data_fraction)
        idx = rng_for(rc.seed, "data", t, cid).choice(len(shard), size=k, replace=False)
        sample = [corpus[shard[i]] for i in sorted(idx)]
        hooks = TrainHooks()
        if algo is Algo.FEDPROX:
            hooks = TrainHooks(prox_mu=state.algo.mu, prox_anchor=state.params)
        elif algo is Algo.SCAFFOLD:
            c_i = state.client_controls.get(cid, np.zeros_like(state.params))
            hooks = TrainHooks(scaffold_c=state.control, scaffold_c_i=c_i)
        try:
            upd = trainer(state.params, sample, hooks, derive_seed(rc.seed, "train", t, cid))
        except Exception as exc:
            raise TrainerFailure(cid, exc) from exc
        updates.append(replace(upd, client_id=cid))
        sizes.append(k)

    agg = aggregate(updates, rc.weighting)
    new = server_step(state, agg)
    payload = len(selected) * communication_bytes(state.dim, rc.bytes_per_param)
    if algo is Algo.SCAFFOLD:
        new = scaffold_server_control(new, updates, len(manifest.shards))
        for u in updates:
            old = new.client_controls.get(u.client_id, np.zeros_like(state.params))
            new.client_controls[u.client_id] = old + u.control_delta
        payload *= 2
    log = RoundLog(
        round=t + 1,
        selected_clients=tuple(selected),
        samples_per_client=tuple(sizes),
        payload_bytes=payload,
        delta_l2=float(np.linalg.norm(agg)),
        wall_time_ms=round((time.perf_counter() - t0) * 1e3, 3),
    )
    return new, log


def run(state: ServerState, manifest: PartitionManifest, corpus: Mapping[str, Episode],
        trainer: LocalTrainer, rc: RoundConfig,
        on_round: Callable[[ServerState, RoundLog], None] | None = None) -> tuple[ServerState, list[RoundLog]]:
    """Rounds ``state.round + 1`` .. ``rc.total_rounds``; resumes transparently."""
    logs = []
    while state.round < rc.total_rounds:
        state, log = run_round(state, manifest, corpus, trainer, rc)
        logs.append(log)
        if on_round is not None:
            on_round(state, log)
    return state, logs


# ---------------------------------------------------------------------------
# communication accounting
# ---------------------------------------------------------------------------


class Payload(str, Enum):
    FULL = "FULL"
    ADAPTER = "ADAPTER"


def communication_bytes(dim: int, bytes_per_param: int = 8, payload=Payload.FULL, adapter_dim: int = 0) -> int:
    """Bytes one client uploads per round."""
    if bytes_per_param not in (2, 4, 8):
        raise FLError("bytes_per_param must be 2, 4 or 8")
    if dim < 0 or adapter_dim < 0:
        raise FLError("dimensions must be nonnegative")
    n = dim if Payload(payload) is Payload.FULL else adapter_dim
    return n * bytes_per_param


def lora_param_count(layer_shapes: Sequence[tuple[int, int]], rank: int) -> int:
    """Adapter size for rank-``rank`` LoRA on (d_out, d_in) weight matrices."""
    return sum(rank * (d_in + d_out) for d_out, d_in in layer_shapes)


def communication_ledger(dim: int, adapter_dim: int, rounds: int, clients_per_round: int,
                         bytes_per_param: int = 8) -> dict:
    full = communication_bytes(dim, bytes_per_param, Payload.FULL)
    adapter = communication_bytes(dim, bytes_per_param, Payload.ADAPTER, adapter_dim)
    uploads = rounds * clients_per_round
    return {
        "dim": dim,
        "adapter_dim": adapter_dim,
        "bytes_per_param": bytes_per_param,
        "rounds": rounds,
        "clients_per_round": clients_per_round,
        "full_bytes_per_client_round": full,
        "adapter_bytes_per_client_round": adapter,
        "full_bytes_total": full * uploads,
        "adapter_bytes_total": adapter * uploads,
        "adapter_to_full_ratio": adapter / full if full else None,
    }
