"""Client partitions over one tag axis (IID, Non-Uniform, Partial, Skew) and
the seven two-level full-corpus variants built from them.

Every function here is deterministic in its seed. Per-value episode lists
start from sorted ids and are permuted by a seeded generator, so ties and
remainders never depend on input order.
"""
from __future__ import annotations

import csv
import io
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .episodes import Episode
from .fileio import atomic_write_text, read_json, write_json
from .seeding import derive_seed, rng_for


class PartitionError(ValueError):
    pass


class UndefinedAxisValue(PartitionError):
    pass


class TooFewEpisodes(PartitionError):
    pass


class InfeasibleSpec(PartitionError):
    pass


class Axis(str, Enum):
    PLATFORM = "PLATFORM"
    DEVICE = "DEVICE"
    OS = "OS"
    SOURCE = "SOURCE"
    APP_CATEGORY = "APP_CATEGORY"


class Scheme(str, Enum):
    IID = "IID"
    NON_UNIFORM = "NON_UNIFORM"
    PARTIAL = "PARTIAL"
    SKEW = "SKEW"


class FullVariant(str, Enum):
    FULL_IID = "FULL_IID"
    FULL_NON_UNIFORM = "FULL_NON_UNIFORM"
    PLATFORM_PARTIAL = "PLATFORM_PARTIAL"
    PLATFORM_NON_UNIFORM = "PLATFORM_NON_UNIFORM"
    PLATFORM_SKEW = "PLATFORM_SKEW"
    SOURCE_NON_UNIFORM = "SOURCE_NON_UNIFORM"
    SOURCE_SKEW = "SOURCE_SKEW"


@dataclass(frozen=True)
class PartitionSpec:
    axis: Axis
    scheme: Scheme
    num_clients: int
    alpha: float = 1.0
    excluded_per_client: int = 1
    seed: int = 0
    # False: Non-Uniform splits each value by its own Dirichlet column, so
    # client sizes vary too
    balance_quantity: bool = True

    def __post_init__(self):
        object.__setattr__(self, "axis", Axis(self.axis))
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.num_clients < 1:
            raise InfeasibleSpec("num_clients must be positive")
        if not self.alpha > 0:
            raise InfeasibleSpec("alpha must be positive")
        if self.excluded_per_client < 1:
            raise InfeasibleSpec("excluded_per_client must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["axis"] = self.axis.value
        d["scheme"] = self.scheme.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PartitionSpec":
        return cls(**d)


@dataclass(frozen=True)
class PartitionManifest:
    """Client shards plus the axis labels needed to recount them.

    ``labels`` maps axis name -> episode_id -> value; it always covers the
    primary ``axis`` and, for full-corpus variants, PLATFORM and SOURCE.
    """

    axis: Axis
    shards: Mapping[str, tuple[str, ...]]
    labels: Mapping[str, Mapping[str, str]]
    spec: PartitionSpec | None = None
    variant: FullVariant | None = None
    stats: Mapping[str, Mapping[str, int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.stats:
            object.__setattr__(self, "stats", _count(self.shards, self.labels[self.axis.value]))

    @property
    def client_ids(self) -> list[str]:
        return sorted(self.shards)

    @property
    def num_episodes(self) -> int:
        return sum(len(s) for s in self.shards.values())

    def to_dict(self) -> dict:
        return {
            "axis": self.axis.value,
            "spec": self.spec.to_dict() if self.spec else None,
            "variant": self.variant.value if self.variant else None,
            "shards": {c: list(s) for c, s in sorted(self.shards.items())},
            "stats": {c: dict(sorted(v.items())) for c, v in sorted(self.stats.items())},
            "labels": {a: dict(sorted(m.items())) for a, m in sorted(self.labels.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PartitionManifest":
        return cls(
            axis=Axis(d["axis"]),
            shards={c: tuple(s) for c, s in d["shards"].items()},
            labels=d["labels"],
            spec=PartitionSpec.from_dict(d["spec"]) if d.get("spec") else None,
            variant=FullVariant(d["variant"]) if d.get("variant") else None,
        )


def _count(shards, labels) -> dict[str, dict[str, int]]:
    return {c: dict(Counter(labels[e] for e in eids)) for c, eids in shards.items()}


def client_name(k: int, num_clients: int) -> str:
    return f"client_{k:0{max(2, len(str(num_clients - 1)))}d}"


# ---------------------------------------------------------------------------
# allocation primitives
# ---------------------------------------------------------------------------


def _interleave(groups: Sequence[Sequence[str]]) -> list[str]:
    out = []
    for i in range(max((len(g) for g in groups), default=0)):
        out.extend(g[i] for g in groups if i < len(g))
    return out


def _ordered_by_value(episodes, axis: Axis, rng, secondary: Axis | None):
    """value -> episode ids, seeded-shuffled and interleaved over ``secondary``.

    Interleaving keeps any contiguous slice or round-robin deal balanced on
    the secondary axis.
    """
    by_value: dict[str, dict[str, list[str]]] = defaultdict(lambda: defaultdict(list))
    for ep in episodes:
        sub = ep.tag.value(secondary.value) if secondary else ""
        by_value[ep.tag.value(axis.value)][sub].append(ep.episode_id)
    out = {}
    for v in sorted(by_value):
        groups = []
        for sub in sorted(by_value[v]):
            ids = sorted(by_value[v][sub])
            groups.append([ids[i] for i in rng.permutation(len(ids))])
        out[v] = _interleave(groups)
    return out


def _deal(ids: Sequence[str], clients: Sequence[int], shards, start: int = 0) -> int:
    n = len(clients)
    for i, eid in enumerate(ids):
        shards[clients[(start + i) % n]].append(eid)
    return start + len(ids)


def _slice(ids: Sequence[str], counts: Sequence[int], shards) -> None:
    pos = 0
    for k, c in enumerate(counts):
        shards[k].extend(ids[pos:pos + c])
        pos += c


def _sinkhorn(P: np.ndarray, rows: np.ndarray, cols: np.ndarray, iters: int = 1000) -> np.ndarray:
    M = np.maximum(P, 1e-12)
    for _ in range(iters):
        M *= (rows / M.sum(axis=1))[:, None]
        M *= (cols / M.sum(axis=0))[None, :]
        if np.abs(M.sum(axis=1) - rows).max() < 1e-9:
            break
    return M


def _integerize(M: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Round a nonnegative matrix to integers with exact row and column sums."""
    F = np.floor(M).astype(np.int64)
    frac = M - F
    rdef = rows.astype(np.int64) - F.sum(axis=1)
    cdef = cols.astype(np.int64) - F.sum(axis=0)
    # cells visited by descending fractional part; ties by (row, col)
    order = sorted(np.ndindex(*M.shape), key=lambda kv: (-frac[kv], kv))
    while rdef.sum() > 0:
        for k, v in order:
            if rdef[k] > 0 and cdef[v] > 0:
                F[k, v] += 1
                rdef[k] -= 1
                cdef[v] -= 1
    return F


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    quotas = total * weights / weights.sum()
    alloc = np.floor(quotas).astype(np.int64)
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[: total - int(alloc.sum())]:
        alloc[i] += 1
    return alloc


def _balanced_sizes(n: int, k: int, rng) -> np.ndarray:
    sizes = np.full(k, n // k, dtype=np.int64)
    sizes[rng.permutation(k)[: n % k]] += 1
    return sizes


def _assign(episodes: Sequence[Episode], spec: PartitionSpec, secondary: Axis | None) -> list[list[str]]:
    K = spec.num_clients
    rng = rng_for(spec.seed, "partition", spec.axis.value, spec.scheme.value, K)
    by_value = _ordered_by_value(episodes, spec.axis, rng, secondary)
    values = list(by_value)
    V = len(values)
    shards: list[list[str]] = [[] for _ in range(K)]

    if spec.scheme is Scheme.IID:
        order = [int(k) for k in rng.permutation(K)]
        pos = 0
        for v in values:
            pos = _deal(by_value[v], order, shards, pos)

    elif spec.scheme is Scheme.NON_UNIFORM:
        P = rng.dirichlet(np.full(V, spec.alpha), size=K)
        cols = np.array([len(by_value[v]) for v in values], dtype=float)
        if spec.balance_quantity:
            rows = _balanced_sizes(int(cols.sum()), K, rng).astype(float)
            counts = _integerize(_sinkhorn(P, rows, cols), rows, cols)
        else:
            counts = np.stack([_largest_remainder(int(cols[j]), P[:, j] + 1e-12) for j in range(V)], axis=1)
        for j, v in enumerate(values):
            _slice(by_value[v], counts[:, j], shards)

    elif spec.scheme is Scheme.PARTIAL:
        e = spec.excluded_per_client
        if e >= V:
            raise InfeasibleSpec(f"cannot deny {e} of {V} values per client")
        if K * e < V:
            raise InfeasibleSpec(f"{K} clients denying {e} values each cannot cover all {V} values")
        denied = [{values[(k * e + j) % V] for j in range(e)} for k in range(K)]
        pos = 0
        for v in values:
            allowed = [k for k in range(K) if v not in denied[k]]
            if not allowed:
                raise InfeasibleSpec(f"value {v} is denied to every client")
            pos = _deal(by_value[v], allowed, shards, pos)

    elif spec.scheme is Scheme.SKEW:
        if K < V:
            raise InfeasibleSpec(f"skew needs at least one client per value ({K} < {V})")
        for j, v in enumerate(values):
            _deal(by_value[v], [k for k in range(K) if k % V == j], shards)

    return shards


def _labels(episodes, axes) -> dict[str, dict[str, str]]:
    return {a.value: {e.episode_id: e.tag.value(a.value) for e in episodes} for a in axes}


def _check_axis(episodes, axis: Axis) -> None:
    for ep in episodes:
        v = ep.tag.value(axis.value)
        if not v or v == "NA":
            raise UndefinedAxisValue(f"{ep.episode_id} has no {axis.value} value")


def partition(episodes: Sequence[Episode], spec: PartitionSpec,
              secondary: Axis | None = None) -> PartitionManifest:
    """Split episodes across ``spec.num_clients`` clients along ``spec.axis``."""
    _check_axis(episodes, spec.axis)
    if len(episodes) < spec.num_clients:
        raise TooFewEpisodes(f"{len(episodes)} episodes for {spec.num_clients} clients")
    shards = _assign(episodes, spec, secondary)
    K = spec.num_clients
    axes = {spec.axis} | ({secondary} if secondary else set())
    return PartitionManifest(
        axis=spec.axis,
        shards={client_name(k, K): tuple(s) for k, s in enumerate(shards)},
        labels=_labels(episodes, sorted(axes, key=lambda a: a.value)),
        spec=spec,
    )


def compose_full(episodes: Sequence[Episode], variant, num_clients: int, seed: int = 0,
                 alpha: float = 1.0) -> PartitionManifest:
    """One of the seven platform-then-source partition variants."""
    variant = FullVariant(variant)
    if num_clients < 9 or num_clients % 9:
        raise InfeasibleSpec(f"full-corpus variants use a multiple of 9 clients, got {num_clients}")
    platforms: dict[str, set[str]] = defaultdict(set)
    for ep in episodes:
        platforms[ep.tag.platform].add(ep.tag.source)
    if len(platforms) < 2 or any(len(s) < 2 for s in platforms.values()):
        raise InfeasibleSpec("need >= 2 platforms with >= 2 sources each")
    K, P = num_clients, len(platforms)
    spec_seed = derive_seed(seed, "full", variant.value)

    def one_level(axis, scheme, **kw):
        return partition(episodes, PartitionSpec(axis, scheme, K, alpha=alpha, seed=spec_seed, **kw),
                         secondary=Axis.SOURCE if axis is Axis.PLATFORM else None)

    if variant is FullVariant.FULL_IID:
        m = one_level(Axis.SOURCE, Scheme.IID)
        shards = m.shards
    elif variant is FullVariant.FULL_NON_UNIFORM:
        shards = one_level(Axis.SOURCE, Scheme.NON_UNIFORM).shards
    elif variant is FullVariant.PLATFORM_PARTIAL:
        if P > 2:
            shards = one_level(Axis.PLATFORM, Scheme.PARTIAL, excluded_per_client=P - 2).shards
        else:
            shards = one_level(Axis.PLATFORM, Scheme.IID).shards
    elif variant is FullVariant.PLATFORM_NON_UNIFORM:
        shards = one_level(Axis.PLATFORM, Scheme.NON_UNIFORM, balance_quantity=False).shards
    elif variant is FullVariant.PLATFORM_SKEW:
        shards = one_level(Axis.PLATFORM, Scheme.SKEW).shards
    else:
        inner = Scheme.NON_UNIFORM if variant is FullVariant.SOURCE_NON_UNIFORM else Scheme.SKEW
        shards = _platform_groups(episodes, K, inner, spec_seed, alpha)

    return PartitionManifest(
        axis=Axis.SOURCE,
        shards={c: tuple(s) for c, s in shards.items()},
        labels=_labels(episodes, (Axis.PLATFORM, Axis.SOURCE)),
        variant=variant,
    )


def _platform_groups(episodes, K: int, inner: Scheme, seed: int, alpha: float) -> dict[str, tuple[str, ...]]:
    """Platform skew first, then ``inner`` over SOURCE within each platform's clients."""
    plats = sorted({e.tag.platform for e in episodes})
    shards: dict[str, tuple[str, ...]] = {}
    for j, p in enumerate(plats):
        members = [k for k in range(K) if k % len(plats) == j]
        sub = [e for e in episodes if e.tag.platform == p]
        spec = PartitionSpec(Axis.SOURCE, inner, len(members), alpha=alpha, seed=derive_seed(seed, "group", p))
        if len(sub) < len(members):
            raise TooFewEpisodes(f"platform {p}: {len(sub)} episodes for {len(members)} clients")
        local = _assign(sub, spec, None)
        for k, ids in zip(members, local):
            shards[client_name(k, K)] = tuple(ids)
    return shards


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StatRow:
    client_id: str
    axis_value: str
    count: int
    proportion: float | None  # None for an empty shard


def partition_stats(manifest: PartitionManifest, axis=None, dense: bool = False) -> list[StatRow]:
    """Per-client counts recomputed from the shards.

    Sparse by default (nonzero cells only, plus zero rows for empty shards);
    ``dense`` emits the full client x value grid for heatmaps.
    """
    axis = Axis(axis) if axis is not None else manifest.axis
    labels = manifest.labels[axis.value]
    values = sorted({labels[e] for s in manifest.shards.values() for e in s} or set(labels.values()))
    rows = []
    for c in manifest.client_ids:
        counts = Counter(labels[e] for e in manifest.shards[c])
        total = sum(counts.values())
        for v in values:
            n = counts.get(v, 0)
            if n or dense or total == 0:
                rows.append(StatRow(c, v, n, n / total if total else None))
    return rows


def stats_csv(rows: Sequence[StatRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["client_id", "axis_value", "count", "proportion"])
    for r in rows:
        w.writerow([r.client_id, r.axis_value, r.count, "NA" if r.proportion is None else repr(r.proportion)])
    return buf.getvalue()


def heterogeneity(manifest: PartitionManifest, axis=None) -> float:
    """Mean over non-empty clients of the Pearson chi-squared distance
    sum_v (p_v - q_v)^2 / q_v between client and global value proportions."""
    axis = Axis(axis) if axis is not None else manifest.axis
    labels = manifest.labels[axis.value]
    ids = [e for s in manifest.shards.values() for e in s]
    glob = Counter(labels[e] for e in ids)
    values = sorted(glob)
    q = np.array([glob[v] for v in values], dtype=float) / len(ids)
    dists = []
    for c in manifest.client_ids:
        cnt = Counter(labels[e] for e in manifest.shards[c])
        total = sum(cnt.values())
        if not total:
            continue
        p = np.array([cnt.get(v, 0) for v in values], dtype=float) / total
        dists.append(float(np.sum((p - q) ** 2 / q)))
    return float(np.mean(dists))


def write_manifest(manifest: PartitionManifest, path, extra: Mapping | None = None) -> None:
    d = manifest.to_dict()
    if extra:
        d.update(extra)
    write_json(path, d)


def read_manifest(path) -> PartitionManifest:
    return PartitionManifest.from_dict(read_json(path))


def write_stats_csv(manifest: PartitionManifest, path, axis=None) -> None:
    atomic_write_text(path, stats_csv(partition_stats(manifest, axis, dense=True)))
