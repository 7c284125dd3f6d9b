"""Episode model, JSONL interchange, cleaning and held-out test carving."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Collection, Iterable, Sequence

from .actions import (
    ActionError,
    TERMINAL_KINDS,
    UnifiedAction,
    UnknownActionKind,
)
from .fileio import dumps, write_jsonl
from .seeding import rng_for

log = logging.getLogger(__name__)

PLATFORMS = ("MOBILE", "WEB", "DESKTOP")
OSES = ("ANDROID", "UBUNTU", "MACOS", "WINDOWS", "NA")

# None: any platform (synthetic corpora pick their own)
SOURCE_PLATFORM = {
    "AC": "MOBILE",
    "AitW": "MOBILE",
    "GO": "MOBILE",
    "GA": "WEB",
    "GA-W": "WEB",
    "M2W": "WEB",
    "OA-W": "WEB",
    "AS": "DESKTOP",
    "OA-Mac": "DESKTOP",
    "OA-Win": "DESKTOP",
    "SYNTH": None,
}


class RejectReason(str, Enum):
    MALFORMED_JSON = "malformed json"
    SCHEMA = "schema violation"
    UNKNOWN_ACTION = "unknown action kind"
    MALFORMED_ACTION = "malformed action parameters"
    OUT_OF_RANGE = "parameter out of range"
    TERMINAL_NOT_LAST = "terminal action not last"
    STEP_INDEX = "step indices not contiguous"
    EMPTY_STEPS = "no steps"
    EMPTY_INSTRUCTION = "empty instruction"
    BAD_SCREEN = "non-positive screen size"
    PLATFORM_MISMATCH = "platform inconsistent with source"
    DUPLICATE_ID = "duplicate episode id"
    MISSING_IMAGE = "missing image"


class InvalidEpisode(ValueError):
    def __init__(self, reason: RejectReason, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason
        self.detail = detail


class EmptyCorpus(ValueError):
    pass


class IoFailure(OSError):
    pass


class InsufficientEpisodes(ValueError):
    pass


@dataclass(frozen=True)
class Rejection:
    reason: RejectReason
    episode_id: str | None = None
    line: int | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        d = {"reason": self.reason.name, "detail": self.detail}
        if self.episode_id is not None:
            d["episode_id"] = self.episode_id
        if self.line is not None:
            d["line"] = self.line
        return d


@dataclass(frozen=True)
class SourceTag:
    source: str
    platform: str
    os: str = "NA"
    device: str = "NA"
    app_category: str = "NA"

    def __post_init__(self):
        if self.source not in SOURCE_PLATFORM:
            raise InvalidEpisode(RejectReason.SCHEMA, f"unknown source {self.source!r}")
        if self.platform not in PLATFORMS:
            raise InvalidEpisode(RejectReason.SCHEMA, f"unknown platform {self.platform!r}")
        if self.os not in OSES:
            raise InvalidEpisode(RejectReason.SCHEMA, f"unknown os {self.os!r}")
        expected = SOURCE_PLATFORM[self.source]
        if expected is not None and expected != self.platform:
            raise InvalidEpisode(RejectReason.PLATFORM_MISMATCH,
                                 f"{self.source} is {expected}, tagged {self.platform}")

    def value(self, axis: str) -> str:
        return getattr(self, axis.lower())


@dataclass(frozen=True)
class Step:
    index: int
    image_ref: str
    screen_w: int
    screen_h: int
    action: UnifiedAction

    def __post_init__(self):
        if self.screen_w <= 0 or self.screen_h <= 0:
            raise InvalidEpisode(RejectReason.BAD_SCREEN, f"{self.screen_w}x{self.screen_h}")


@dataclass(frozen=True)
class Episode:
    episode_id: str
    instruction: str
    tag: SourceTag
    steps: tuple[Step, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.instruction or not self.instruction.strip():
            raise InvalidEpisode(RejectReason.EMPTY_INSTRUCTION)
        if not self.steps:
            raise InvalidEpisode(RejectReason.EMPTY_STEPS)
        if [s.index for s in self.steps] != list(range(len(self.steps))):
            raise InvalidEpisode(RejectReason.STEP_INDEX)
        for s in self.steps[:-1]:
            if s.action.kind in TERMINAL_KINDS:
                raise InvalidEpisode(RejectReason.TERMINAL_NOT_LAST, f"{s.action.kind.value} at step {s.index}")

    def __len__(self) -> int:
        return len(self.steps)


# ---------------------------------------------------------------------------
# interchange
# ---------------------------------------------------------------------------


def episode_to_dict(ep: Episode) -> dict:
    t = ep.tag
    return {
        "episode_id": ep.episode_id,
        "instruction": ep.instruction,
        "tag": {"source": t.source, "platform": t.platform, "os": t.os,
                "device": t.device, "app_category": t.app_category},
        "steps": [
            {"index": s.index, "image_ref": s.image_ref, "screen_w": s.screen_w,
             "screen_h": s.screen_h, "action": s.action.to_dict()}
            for s in ep.steps
        ],
    }


def episode_from_dict(d: dict) -> Episode:
    try:
        tag = d["tag"]
        steps = []
        for s in d["steps"]:
            try:
                action = UnifiedAction.from_dict(s["action"])
            except UnknownActionKind as exc:
                raise InvalidEpisode(RejectReason.UNKNOWN_ACTION, str(exc)) from None
            except ActionError as exc:
                raise InvalidEpisode(RejectReason.MALFORMED_ACTION, str(exc)) from None
            for key in ("index", "screen_w", "screen_h"):
                if not isinstance(s[key], int) or isinstance(s[key], bool):
                    raise InvalidEpisode(RejectReason.SCHEMA, f"step {key} must be an integer")
            steps.append(Step(s["index"], str(s["image_ref"]), s["screen_w"], s["screen_h"], action))
        return Episode(
            episode_id=str(d["episode_id"]),
            instruction=str(d["instruction"]),
            tag=SourceTag(tag["source"], tag["platform"], tag.get("os", "NA"),
                          tag.get("device", "NA"), tag.get("app_category", "NA")),
            steps=tuple(steps),
        )
    except (KeyError, TypeError) as exc:
        raise InvalidEpisode(RejectReason.SCHEMA, f"missing or mistyped field {exc}") from None


def _jsonl_files(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix == ".jsonl")
    return [path]


def load_episodes(path) -> tuple[list[Episode], list[Rejection]]:
    """Read every valid episode in file order; invalid lines become rejections."""
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"{path} does not exist")
    episodes: list[Episode] = []
    rejections: list[Rejection] = []
    seen: set[str] = set()
    lineno = 0
    try:
        for f in _jsonl_files(path):
            with open(f, encoding="utf-8") as fh:
                for lineno_in_file, line in enumerate(fh, 1):
                    lineno += 1
                    if not line.strip():
                        continue
                    try:
                        d = json.loads(line)
                    except json.JSONDecodeError as exc:
                        rejections.append(Rejection(RejectReason.MALFORMED_JSON, line=lineno, detail=str(exc)))
                        continue
                    eid = d.get("episode_id") if isinstance(d, dict) else None
                    try:
                        ep = episode_from_dict(d)
                    except InvalidEpisode as exc:
                        rejections.append(Rejection(exc.reason, episode_id=eid, line=lineno, detail=exc.detail))
                        continue
                    if ep.episode_id in seen:
                        rejections.append(Rejection(RejectReason.DUPLICATE_ID, episode_id=eid, line=lineno))
                        continue
                    seen.add(ep.episode_id)
                    episodes.append(ep)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if not episodes:
        raise EmptyCorpus(f"no valid episodes in {path} ({len(rejections)} rejected)")
    return episodes, rejections


def dump_episodes(episodes: Iterable[Episode], path) -> Path:
    return write_jsonl(path, (episode_to_dict(e) for e in episodes))


def dumps_episodes(episodes: Iterable[Episode]) -> str:
    return "".join(dumps(episode_to_dict(e)) + "\n" for e in episodes)


# ---------------------------------------------------------------------------
# cleaning
# ---------------------------------------------------------------------------


def file_resolver(root) -> Callable[[str], bool]:
    root = Path(root)
    return lambda ref: (root / ref).is_file()


def manifest_resolver(known: Collection[str]) -> Callable[[str], bool]:
    known = frozenset(known)
    return lambda ref: ref in known


def _dedupe(ep: Episode) -> Episode:
    kept: list[Step] = []
    for s in ep.steps:
        if kept and kept[-1].action == s.action:
            continue
        kept.append(s)
    if len(kept) == len(ep.steps):
        return ep
    steps = tuple(Step(i, s.image_ref, s.screen_w, s.screen_h, s.action) for i, s in enumerate(kept))
    return Episode(ep.episode_id, ep.instruction, ep.tag, steps)


def clean(episodes: Sequence[Episode],
          image_exists: Callable[[str], bool] | None = None) -> tuple[list[Episode], list[Rejection]]:
    """Drop episodes with missing images or out-of-range parameters; collapse repeats.

    ``image_exists`` checks an image_ref; pass ``None`` to skip the image check
    (synthetic corpora have no screenshots).
    """
    kept: list[Episode] = []
    rejected: list[Rejection] = []
    for ep in episodes:
        reason = None
        if image_exists is not None:
            missing = [s.image_ref for s in ep.steps if not image_exists(s.image_ref)]
            if missing:
                reason = Rejection(RejectReason.MISSING_IMAGE, ep.episode_id, detail=missing[0])
        if reason is None:
            bad = [s for s in ep.steps if not s.action.in_range]
            if bad:
                reason = Rejection(RejectReason.OUT_OF_RANGE, ep.episode_id,
                                   detail=f"step {bad[0].index}: {bad[0].action.point}")
        if reason is not None:
            log.debug("rejecting %s: %s", ep.episode_id, reason.reason.value)
            rejected.append(reason)
            continue
        kept.append(_dedupe(ep))
    return kept, rejected


# ---------------------------------------------------------------------------
# test-set carving
# ---------------------------------------------------------------------------


def _largest_remainder(total: int, sizes: list[int]) -> list[int]:
    n = sum(sizes)
    quotas = [total * s / n for s in sizes]
    alloc = [int(q) for q in quotas]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[: total - sum(alloc)]:
        alloc[i] += 1
    return alloc


def sample_test_set(episodes: Sequence[Episode], n: int = 100,
                    seed: int = 0) -> tuple[list[Episode], list[Episode]]:
    """Hold out ``n`` episodes stratified over trajectory-length quartiles."""
    sources = {e.tag.source for e in episodes}
    if len(sources) > 1:
        raise ValueError(f"test carving is per source, got {sorted(sources)}")
    if n < 0 or n > len(episodes):
        raise InsufficientEpisodes(f"cannot hold out {n} of {len(episodes)} episodes")
    source = next(iter(sources), "")
    ranked = sorted(episodes, key=lambda e: (len(e), e.episode_id))
    total = len(ranked)
    bins: list[list[Episode]] = [[] for _ in range(4)]
    for r, ep in enumerate(ranked):
        bins[(4 * r) // total].append(ep)
    alloc = _largest_remainder(n, [len(b) for b in bins]) if total else [0] * 4
    chosen: set[str] = set()
    for q, (b, k) in enumerate(zip(bins, alloc)):
        if k == 0:
            continue
        ids = sorted(e.episode_id for e in b)
        pick = rng_for(seed, "test-split", source, q).choice(len(ids), size=k, replace=False)
        chosen.update(ids[i] for i in pick)
    test = [e for e in episodes if e.episode_id in chosen]
    train = [e for e in episodes if e.episode_id not in chosen]
    return test, train
