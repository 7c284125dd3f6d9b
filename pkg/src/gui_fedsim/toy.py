"""A linear softmax stand-in for the VLM, plus synthetic heterogeneous corpora.

The model maps hashed episode features to one of the 17 action kinds. Its
parameters are a (17, D + 1) matrix, bias last, flattened row-major.

Features of step ``i`` of an episode::

    x = sum_t g(token_t) / sqrt(T)  +  TAG_WEIGHT * mean_f g(f=tag_f)  +  STEP_WEIGHT * g(step=i)

where ``g(s)`` is a standard normal vector seeded by a hash of ``s``.
"""
from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .actions import (
    ACTION_KINDS,
    COORD_MAX,
    DIRECTIONS,
    NUM_KINDS,
    POINT_KINDS,
    TERMINAL_KINDS,
    ActionKind,
    UnifiedAction,
)
from .episodes import OSES, PLATFORMS, Episode, SourceTag, Step
from .fl import ClientUpdate, TrainHooks
from .seeding import rng_for

FEATURE_DIM = 64
TAG_WEIGHT = 0.5
STEP_WEIGHT = 0.5
MAX_STEP_FEATURE = 31
TAG_FIELDS = ("source", "platform", "os", "device", "app_category")


class EmptyShard(ValueError):
    pass


@functools.lru_cache(maxsize=1 << 16)
def _hash_vec(key: str, dim: int) -> np.ndarray:
    v = rng_for(0, "feature", key).standard_normal(dim)
    v.setflags(write=False)
    return v


def _step_features(tokens: Sequence[str], tag: SourceTag, steps: int, dim: int) -> np.ndarray:
    base = np.zeros(dim)
    for tok in tokens:
        base += _hash_vec("tok=" + tok, dim)
    if tokens:
        base /= math.sqrt(len(tokens))
    tag_vec = sum(_hash_vec(f"{f}={getattr(tag, f)}", dim) for f in TAG_FIELDS) / len(TAG_FIELDS)
    base += TAG_WEIGHT * tag_vec
    out = np.empty((steps, dim))
    for i in range(steps):
        out[i] = base + STEP_WEIGHT * _hash_vec(f"step={min(i, MAX_STEP_FEATURE)}", dim)
    return out


def featurize_arrays(episode: Episode, dim: int = FEATURE_DIM) -> tuple[np.ndarray, np.ndarray]:
    X = _step_features(episode.instruction.lower().split(), episode.tag, len(episode.steps), dim)
    y = np.array([s.action.kind.index for s in episode.steps], dtype=np.int64)
    return X, y


def featurize(episode: Episode, dim: int = FEATURE_DIM) -> list[tuple[np.ndarray, int]]:
    """One (feature vector, kind index) pair per step."""
    X, y = featurize_arrays(episode, dim)
    return [(X[i], int(y[i])) for i in range(len(y))]


def stack_features(episodes: Sequence[Episode], dim: int = FEATURE_DIM) -> tuple[np.ndarray, np.ndarray]:
    if not episodes:
        return np.zeros((0, dim)), np.zeros(0, dtype=np.int64)
    parts = [featurize_arrays(e, dim) for e in episodes]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def param_dim(feature_dim: int = FEATURE_DIM) -> int:
    return NUM_KINDS * (feature_dim + 1)


def init_params(feature_dim: int = FEATURE_DIM) -> np.ndarray:
    return np.zeros(param_dim(feature_dim))


def as_matrix(params: np.ndarray) -> np.ndarray:
    if params.shape[0] % NUM_KINDS:
        raise ValueError(f"parameter length {params.shape[0]} is not a multiple of {NUM_KINDS}")
    return params.reshape(NUM_KINDS, -1)


def loss_and_grad(params: np.ndarray, X: np.ndarray, y: np.ndarray,
                  prox_mu: float | None = None, prox_anchor: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy (+ mu/2 ||w - anchor||^2) and its gradient."""
    W = as_matrix(np.ascontiguousarray(params, dtype=np.float64))
    loss, grad = kernels.softmax_xent(W, np.ascontiguousarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64))
    grad = grad.ravel()
    if prox_mu:
        diff = params - prox_anchor
        loss += 0.5 * prox_mu * float(diff @ diff)
        grad = grad + prox_mu * diff
    return float(loss), grad


def predict(params: np.ndarray, X: np.ndarray) -> np.ndarray:
    if X.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.asarray(kernels.predict(as_matrix(params), np.ascontiguousarray(X, dtype=np.float64)))


def accuracy(params: np.ndarray, episodes: Sequence[Episode], dim: int | None = None) -> float:
    dim = dim if dim is not None else as_matrix(params).shape[1] - 1
    X, y = stack_features(episodes, dim)
    if len(y) == 0:
        return 0.0
    return float(np.mean(predict(params, X) == y))


# ---------------------------------------------------------------------------
# local training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainSpec:
    local_epochs: int = 1
    batch_size: int = 4
    client_lr: float = 5e-5
    feature_dim: int = FEATURE_DIM

    def __post_init__(self):
        if self.local_epochs < 1 or self.batch_size < 1 or self.feature_dim < 1:
            raise ValueError("local_epochs, batch_size and feature_dim must be positive")
        if self.client_lr < 0:
            raise ValueError("client_lr must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainSpec":
        return cls(**d)


def local_train(global_params: np.ndarray, shard_sample: Sequence[Episode], spec: TrainSpec,
                hooks: TrainHooks | None = None, seed: int = 0,
                features: tuple[np.ndarray, np.ndarray] | None = None) -> ClientUpdate:
    """Minibatch SGD from the global point; K = epochs * ceil(pairs / batch)."""
    if not shard_sample:
        raise EmptyShard("no episodes to train on")
    hooks = hooks or TrainHooks()
    X, y = features if features is not None else stack_features(shard_sample, spec.feature_dim)
    n = len(y)
    x0 = np.asarray(global_params, dtype=np.float64)
    w = x0.copy()
    correction = None
    if hooks.scaffold_c is not None:
        correction = hooks.scaffold_c - hooks.scaffold_c_i
    steps = 0
    for epoch in range(spec.local_epochs):
        order = rng_for(seed, "epoch", epoch).permutation(n)
        for start in range(0, n, spec.batch_size):
            idx = np.sort(order[start:start + spec.batch_size])
            _, g = loss_and_grad(w, X[idx], y[idx], hooks.prox_mu, hooks.prox_anchor)
            if correction is not None:
                g = g + correction
            w = w - spec.client_lr * g
            steps += 1
    delta = w - x0
    control_delta = None
    if hooks.scaffold_c is not None:
        # c_i+ - c_i = -c + (x - y_i) / (K lr)
        drift = (x0 - w) / (steps * spec.client_lr) if spec.client_lr > 0 else np.zeros_like(w)
        control_delta = drift - hooks.scaffold_c
    return ClientUpdate(client_id="", delta=delta, num_samples=n, control_delta=control_delta)


class ToyTrainer:
    """Callable trainer for :func:`gui_fedsim.fl.run_round`.

    Keeps a per-episode feature cache; results never depend on it.
    """

    def __init__(self, spec: TrainSpec):
        self.spec = spec
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def features(self, episodes: Sequence[Episode]) -> tuple[np.ndarray, np.ndarray]:
        parts = []
        for e in episodes:
            f = self._cache.get(e.episode_id)
            if f is None:
                f = self._cache[e.episode_id] = featurize_arrays(e, self.spec.feature_dim)
            parts.append(f)
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    def __call__(self, global_params, shard_sample, hooks, seed) -> ClientUpdate:
        if not shard_sample:
            raise EmptyShard("no episodes to train on")
        return local_train(global_params, shard_sample, self.spec, hooks, seed,
                           features=self.features(shard_sample))


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic corpus knobs.

    ``separation`` sets how far apart the values' feature means sit (about
    ``separation`` in Euclidean norm) and how far each value's labelling
    teacher moves from the shared one.
    """

    num_values: int = 3
    episodes_per_value: int = 200
    feature_dim: int = FEATURE_DIM
    label_noise: float = 0.0
    separation: float = 1.0
    seed: int = 0
    axis: str = "PLATFORM"
    tokens_per_instruction: int = 64
    max_steps: int = 4
    vocab_size: int = 2000
    # teacher = shared + teacher_drift * separation * per-value noise
    teacher_drift: float = 0.25

    def __post_init__(self):
        if self.num_values < 1 or self.episodes_per_value < 0:
            raise ValueError("num_values must be positive, episodes_per_value nonnegative")
        if not 0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must lie in [0, 0.5)")
        if self.separation < 0 or self.teacher_drift < 0:
            raise ValueError("separation and teacher_drift must be nonnegative")
        if self.axis not in ("PLATFORM", "OS", "DEVICE", "APP_CATEGORY"):
            raise ValueError(f"synthetic corpora cannot vary {self.axis}")
        limit = {"PLATFORM": len(PLATFORMS), "OS": len(OSES) - 1}.get(self.axis)
        if limit is not None and self.num_values > limit:
            raise ValueError(f"{self.axis} has only {limit} values")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthSpec":
        return cls(**d)


def synth_values(spec: SynthSpec) -> list[str]:
    if spec.axis == "PLATFORM":
        return list(PLATFORMS[: spec.num_values])
    if spec.axis == "OS":
        return list(OSES[: spec.num_values])
    prefix = "device" if spec.axis == "DEVICE" else "app"
    return [f"{prefix}-{j}" for j in range(spec.num_values)]


def synthetic_teachers(spec: SynthSpec) -> dict[str, np.ndarray]:
    """Value -> (17, D + 1) labelling matrix; all equal when separation is 0."""
    shape = (NUM_KINDS, spec.feature_dim + 1)
    shared = rng_for(spec.seed, "teacher-shared").standard_normal(shape)
    return {
        v: shared + spec.teacher_drift * spec.separation * rng_for(spec.seed, "teacher", v).standard_normal(shape)
        for v in synth_values(spec)
    }


def _tag(spec: SynthSpec, value: str) -> SourceTag:
    kw = {"source": "SYNTH", "platform": "MOBILE", "os": "ANDROID", "device": "NA", "app_category": "NA"}
    kw[spec.axis.lower()] = value
    return SourceTag(**kw)


def _synthetic_action(kind: ActionKind, rng, vocab: int) -> UnifiedAction:
    if kind in POINT_KINDS:
        return UnifiedAction(kind, point=(int(rng.integers(COORD_MAX + 1)), int(rng.integers(COORD_MAX + 1))))
    if kind is ActionKind.SCROLL:
        return UnifiedAction(kind, direction=DIRECTIONS[int(rng.integers(4))])
    if kind is ActionKind.HOTKEY:
        return UnifiedAction(kind, text=("ENTER", "ESC", "TAB", "CTRL+C", "CTRL+V")[int(rng.integers(5))])
    if kind in (ActionKind.TYPE, ActionKind.OPEN_APP, ActionKind.COPY):
        return UnifiedAction(kind, text=f"w{int(rng.integers(vocab))} w{int(rng.integers(vocab))}")
    return UnifiedAction(kind)


def _anchor_count(spec: SynthSpec) -> int:
    # each anchor adds g / sqrt(T), of norm ~ sqrt(D / T)
    T = spec.tokens_per_instruction
    return min(T, int(round(spec.separation * math.sqrt(T / spec.feature_dim))))


def label_features(episode: Episode, spec: SynthSpec) -> np.ndarray:
    """The part of each step's features the teachers look at.

    Anchor tokens and tags are constant within a value, so they are left
    out: labels depend only on within-value variation.
    """
    tokens = [t for t in episode.instruction.lower().split() if not t.startswith("anchor-")]
    z = np.zeros(spec.feature_dim)
    for tok in tokens:
        z += _hash_vec("tok=" + tok, spec.feature_dim)
    z /= math.sqrt(spec.tokens_per_instruction)
    steps = np.stack([STEP_WEIGHT * _hash_vec(f"step={min(i, MAX_STEP_FEATURE)}", spec.feature_dim)
                      for i in range(len(episode.steps))])
    return z + steps


def teacher_labels(teacher: np.ndarray, Z: np.ndarray) -> np.ndarray:
    return np.argmax(Z @ teacher[:, :-1].T + teacher[:, -1], axis=1)


def gen_synthetic(spec: SynthSpec) -> list[Episode]:
    """``num_values * episodes_per_value`` episodes, value-major order.

    Episodes stop early at a terminal kind or a repeated action, so lengths
    vary between 1 and ``max_steps``.
    """
    teachers = synthetic_teachers(spec)
    T = spec.tokens_per_instruction
    anchors = _anchor_count(spec)
    episodes = []
    for value in synth_values(spec):
        tag = _tag(spec, value)
        teacher = teachers[value]
        for i in range(spec.episodes_per_value):
            rng = rng_for(spec.seed, "episode", value, i)
            tokens = [f"anchor-{value.lower()}"] * anchors
            tokens += [f"w{r}" for r in rng.integers(spec.vocab_size, size=T - anchors)]
            length = int(rng.integers(1, spec.max_steps + 1))
            eid = f"synth-{value.lower()}-{i:05d}"
            draft = Episode(eid, " ".join(tokens), tag,
                            tuple(Step(j, "", 1, 1, UnifiedAction(ActionKind.WAIT)) for j in range(length)))
            labels = teacher_labels(teacher, label_features(draft, spec))
            steps: list[Step] = []
            for j in range(length):
                label = int(labels[j])
                if rng.random() < spec.label_noise:
                    label = int(rng.integers(NUM_KINDS))
                action = _synthetic_action(ACTION_KINDS[label], rng, spec.vocab_size)
                if steps and steps[-1].action == action:
                    break
                steps.append(Step(j, f"synth://{eid}/{j}.png", 1080, 1920, action))
                if action.kind in TERMINAL_KINDS:
                    break
            episodes.append(Episode(eid, " ".join(tokens), tag, tuple(steps)))
    return episodes
