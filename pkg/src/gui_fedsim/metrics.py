"""Step-level scoring: action type, grounding and success rate."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .actions import (
    COORD_MAX,
    DIRECTION_KINDS,
    POINT_KINDS,
    ActionError,
    ActionKind,
    UnifiedAction,
    hotkey_chord,
    parse_action,
)
from .episodes import Episode

GROUNDING_RATIO = 0.14
SIMILARITY_THRESHOLD = 0.5
SIMILARITY_KINDS = frozenset({ActionKind.TYPE, ActionKind.OPEN_APP, ActionKind.COPY})
NORMALIZED_SPACE = (COORD_MAX, COORD_MAX)


class EvalError(ValueError):
    pass


class DanglingPrediction(EvalError):
    pass


class DuplicatePrediction(EvalError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    episode_id: str
    step_index: int
    predicted: str

    def to_dict(self) -> dict:
        return {"episode_id": self.episode_id, "step_index": self.step_index, "predicted": self.predicted}


def type_match(predicted: str, gold: UnifiedAction) -> bool:
    tokens = predicted.split() if isinstance(predicted, str) else []
    return bool(tokens) and tokens[0] == gold.kind.value


def grounding_hit(pred_point, gold_point, space=NORMALIZED_SPACE) -> bool:
    w, h = space
    return math.dist(pred_point, gold_point) <= GROUNDING_RATIO * math.hypot(w, h)


def _f1(a: Counter, b: Counter) -> float:
    common = sum((a & b).values())
    if common == 0:
        return 0.0
    p = common / sum(a.values())
    r = common / sum(b.values())
    return 2 * p * r / (p + r)


def similarity(a: str, b: str) -> float:
    """max(token F1, character F1), case-insensitive."""
    ta, tb = a.lower().split(), b.lower().split()
    if not ta and not tb:
        return 1.0
    if not ta or not tb:
        return 0.0
    ca = Counter(ch for ch in a.lower() if not ch.isspace())
    cb = Counter(ch for ch in b.lower() if not ch.isspace())
    return max(_f1(Counter(ta), Counter(tb)), _f1(ca, cb))


def _try_parse(predicted: str) -> UnifiedAction | None:
    try:
        return parse_action(predicted)
    except ActionError:
        return None


def step_success(predicted: str, gold: UnifiedAction, space=NORMALIZED_SPACE) -> bool:
    if not type_match(predicted, gold):
        return False
    k = gold.kind
    if k in POINT_KINDS or k in SIMILARITY_KINDS or k is ActionKind.HOTKEY or k in DIRECTION_KINDS:
        pred = _try_parse(predicted)
        if pred is None:
            return False
        if k in POINT_KINDS:
            return grounding_hit(pred.point, gold.point, space)
        if k in SIMILARITY_KINDS:
            return similarity(pred.text, gold.text) > SIMILARITY_THRESHOLD
        if k is ActionKind.HOTKEY:
            return hotkey_chord(pred.text) == hotkey_chord(gold.text)
        return pred.direction.upper() == gold.direction.upper()
    return True


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class GroupScore:
    n_steps: int = 0
    n_ground_steps: int = 0
    type_hits: int = 0
    ground_hits: int = 0
    successes: int = 0

    def add(self, other: "GroupScore") -> None:
        self.n_steps += other.n_steps
        self.n_ground_steps += other.n_ground_steps
        self.type_hits += other.type_hits
        self.ground_hits += other.ground_hits
        self.successes += other.successes

    @property
    def type_acc(self) -> float:
        return self.type_hits / self.n_steps if self.n_steps else 0.0

    @property
    def ground_acc(self) -> float:
        return self.ground_hits / self.n_ground_steps if self.n_ground_steps else 0.0

    @property
    def sr(self) -> float:
        return self.successes / self.n_steps if self.n_steps else 0.0

    def to_dict(self) -> dict:
        return {"type_acc": self.type_acc, "ground_acc": self.ground_acc, "sr": self.sr,
                "n_steps": self.n_steps, "n_ground_steps": self.n_ground_steps}


@dataclass
class EvalReport:
    groups: dict[str, GroupScore]

    def __getitem__(self, key: str) -> GroupScore:
        return self.groups[key]

    def to_dict(self) -> dict:
        return {"groups": {k: g.to_dict() for k, g in sorted(self.groups.items())}}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "metric", "value", "n"])
        for key, g in sorted(self.groups.items()):
            w.writerow([key, "type_acc", repr(g.type_acc), g.n_steps])
            w.writerow([key, "ground_acc", repr(g.ground_acc), g.n_ground_steps])
            w.writerow([key, "sr", repr(g.sr), g.n_steps])
        return buf.getvalue()


def _score_step(predicted: str | None, gold_step, space) -> GroupScore:
    gold = gold_step.action
    s = GroupScore(n_steps=1, n_ground_steps=int(gold.kind in POINT_KINDS))
    if predicted is None:
        return s
    s.type_hits = int(type_match(predicted, gold))
    if gold.kind in POINT_KINDS:
        pred = _try_parse(predicted)
        if pred is not None and pred.point is not None:
            s.ground_hits = int(grounding_hit(pred.point, gold.point, space))
    s.successes = int(step_success(predicted, gold, space))
    return s


def _space(step, policy: str):
    if policy == "fixed":
        return NORMALIZED_SPACE
    raise EvalError(f"unknown space policy {policy!r}")


def evaluate(predictions: Sequence[PredictionRecord], gold: Sequence[Episode],
             space_policy: str = "fixed") -> EvalReport:
    """Score predictions against gold steps; missing predictions score zero.

    ``space_policy`` "fixed" judges grounding in the normalized 1000x1000
    space; "per-step" maps both points back to the step's native pixels.
    """
    index = {(e.episode_id, s.index): (e, s) for e in gold for s in e.steps}
    preds: dict[tuple[str, int], str] = {}
    for p in predictions:
        key = (p.episode_id, p.step_index)
        if key not in index:
            raise DanglingPrediction(f"no gold step {key}")
        if key in preds:
            raise DuplicatePrediction(f"two predictions for {key}")
        preds[key] = p.predicted

    groups: dict[str, GroupScore] = defaultdict(GroupScore)
    for key, (ep, step) in index.items():
        pred = preds.get(key)
        if space_policy == "per-step":
            s = _score_step_native(pred, step)
        else:
            s = _score_step(pred, step, _space(step, space_policy))
        for g in ("ALL", f"source:{ep.tag.source}", f"platform:{ep.tag.platform}"):
            groups[g].add(s)
    return EvalReport(dict(groups))


def _score_step_native(predicted, step) -> GroupScore:
    """Grounding in native pixels: rescale normalized points to the screen."""
    sx, sy = step.screen_w / COORD_MAX, step.screen_h / COORD_MAX
    gold = step.action
    s = GroupScore(n_steps=1, n_ground_steps=int(gold.kind in POINT_KINDS))
    if predicted is None:
        return s
    s.type_hits = int(type_match(predicted, gold))
    pred = _try_parse(predicted)
    space = (step.screen_w, step.screen_h)
    hit = False
    if gold.kind in POINT_KINDS and pred is not None and pred.point is not None:
        hit = grounding_hit((pred.point[0] * sx, pred.point[1] * sy),
                            (gold.point[0] * sx, gold.point[1] * sy), space)
        s.ground_hits = int(hit)
    if gold.kind in POINT_KINDS:
        s.successes = int(s.type_hits == 1 and hit)
    else:
        s.successes = int(step_success(predicted, gold))
    return s


def load_predictions(path) -> list[PredictionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(PredictionRecord(str(d["episode_id"]), int(d["step_index"]), str(d["predicted"])))
    return out


def gold_predictions(episodes: Iterable[Episode]) -> list[PredictionRecord]:
    """Serialized gold actions: a perfect agent's prediction file."""
    from .actions import serialize_action

    return [PredictionRecord(e.episode_id, s.index, serialize_action(s.action))
            for e in episodes for s in e.steps]


def report_from_dict(d: Mapping) -> dict[str, dict]:
    return dict(d["groups"])


def write_report(report: EvalReport, json_path, csv_path, extra: Mapping | None = None) -> None:
    from .fileio import atomic_write_text, write_json

    d = report.to_dict()
    if extra:
        d.update(extra)
    write_json(json_path, d)
    atomic_write_text(Path(csv_path), report.to_csv())
