"""Unified GUI action vocabulary and its single-line wire format.

Wire grammar (one action per string)::

    KIND <point>[[x, y]]</point>     coordinate actions, x and y in [0, 1000]
    KIND [payload]                   text, hotkey and scroll actions
    KIND                             parameterless actions

Coordinates live in a normalized 1000x1000 integer space. Native pixel
coordinates are converted by :func:`normalize_point` at ingestion.
"""
from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

COORD_MAX = 1000
DIRECTIONS = ("UP", "DOWN", "LEFT", "RIGHT")


class ActionError(ValueError):
    pass


class EmptyInput(ActionError):
    pass


class UnknownActionKind(ActionError):
    pass


class MalformedParameters(ActionError):
    pass


class UnmappableAction(ActionError):
    pass


class ActionKind(str, Enum):
    # declaration order is the label index used by the toy model
    CLICK = "CLICK"
    TYPE = "TYPE"
    SCROLL = "SCROLL"
    COMPLETE = "COMPLETE"
    IMPOSSIBLE = "IMPOSSIBLE"
    WAIT = "WAIT"
    LONG_PRESS = "LONG_PRESS"
    OPEN_APP = "OPEN_APP"
    NAVIGATE_BACK = "NAVIGATE_BACK"
    NAVIGATE_HOME = "NAVIGATE_HOME"
    PRESS_RECENT = "PRESS_RECENT"
    PRESS_ENTER = "PRESS_ENTER"
    DOUBLE_CLICK = "DOUBLE_CLICK"
    RIGHT_CLICK = "RIGHT_CLICK"
    MOVETO = "MOVETO"
    HOTKEY = "HOTKEY"
    COPY = "COPY"

    @property
    def index(self) -> int:
        return _KIND_INDEX[self]

    @classmethod
    def from_index(cls, i: int) -> "ActionKind":
        return ACTION_KINDS[i]


ACTION_KINDS: tuple[ActionKind, ...] = tuple(ActionKind)
_KIND_INDEX = {k: i for i, k in enumerate(ACTION_KINDS)}
NUM_KINDS = len(ACTION_KINDS)

POINT_KINDS = frozenset({ActionKind.CLICK, ActionKind.LONG_PRESS, ActionKind.DOUBLE_CLICK,
                         ActionKind.RIGHT_CLICK, ActionKind.MOVETO})
TEXT_KINDS = frozenset({ActionKind.TYPE, ActionKind.OPEN_APP, ActionKind.HOTKEY, ActionKind.COPY})
DIRECTION_KINDS = frozenset({ActionKind.SCROLL})
TERMINAL_KINDS = frozenset({ActionKind.COMPLETE, ActionKind.IMPOSSIBLE})
PARAMETERLESS_KINDS = frozenset(set(ACTION_KINDS) - POINT_KINDS - TEXT_KINDS - DIRECTION_KINDS)


class ActionDomain(str, Enum):
    BASIC = "BASIC"
    MOBILE = "MOBILE"
    WEB_DESKTOP = "WEB_DESKTOP"


def action_domain(kind) -> ActionDomain:
    """Table position decides the domain: 6 basic, 6 mobile, 5 web/desktop."""
    i = ActionKind(kind).index
    if i < 6:
        return ActionDomain.BASIC
    if i < 12:
        return ActionDomain.MOBILE
    return ActionDomain.WEB_DESKTOP


@dataclass(frozen=True)
class UnifiedAction:
    """One canonical action.

    Construction enforces which parameters a kind carries. The coordinate
    range is checked separately by :meth:`validate` so that ingestion can
    hold an out-of-range action long enough for cleaning to reject it.
    """

    kind: ActionKind
    point: tuple[int, int] | None = None
    text: str | None = None
    direction: str | None = None

    def __post_init__(self):
        try:
            kind = ActionKind(self.kind)
        except ValueError:
            raise UnknownActionKind(f"unknown action kind {self.kind!r}") from None
        object.__setattr__(self, "kind", kind)

        if (self.point is not None) != (kind in POINT_KINDS):
            raise MalformedParameters(f"{kind.value}: point must be {'present' if kind in POINT_KINDS else 'absent'}")
        if (self.text is not None) != (kind in TEXT_KINDS):
            raise MalformedParameters(f"{kind.value}: text must be {'present' if kind in TEXT_KINDS else 'absent'}")
        if (self.direction is not None) != (kind in DIRECTION_KINDS):
            raise MalformedParameters(f"{kind.value}: direction must be {'present' if kind in DIRECTION_KINDS else 'absent'}")

        if self.point is not None:
            if len(self.point) != 2 or not all(_is_int(v) for v in self.point):
                raise MalformedParameters(f"{kind.value}: point must be an integer pair, got {self.point!r}")
            object.__setattr__(self, "point", (int(self.point[0]), int(self.point[1])))
        if self.text is not None:
            if not isinstance(self.text, str):
                raise MalformedParameters(f"{kind.value}: text must be a string")
            if "\n" in self.text or "\r" in self.text:
                raise MalformedParameters(f"{kind.value}: text must be a single line")
        if self.direction is not None:
            d = str(self.direction).upper()
            if d not in DIRECTIONS:
                raise MalformedParameters(f"SCROLL: bad direction {self.direction!r}")
            object.__setattr__(self, "direction", d)

    @property
    def in_range(self) -> bool:
        if self.point is None:
            return True
        x, y = self.point
        return 0 <= x <= COORD_MAX and 0 <= y <= COORD_MAX

    def validate(self) -> "UnifiedAction":
        if not self.in_range:
            raise MalformedParameters(f"{self.kind.value}: coordinate {self.point} outside [0, {COORD_MAX}]")
        return self

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value}
        if self.point is not None:
            d["point"] = list(self.point)
        if self.text is not None:
            d["text"] = self.text
        if self.direction is not None:
            d["direction"] = self.direction
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "UnifiedAction":
        point = d.get("point")
        return cls(
            kind=d["kind"],
            point=tuple(point) if point is not None else None,
            text=d.get("text"),
            direction=d.get("direction"),
        )

    def __str__(self) -> str:
        return serialize_action(self)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


# ---------------------------------------------------------------------------
# wire format
# ---------------------------------------------------------------------------

_HEAD = re.compile(r"(\S+)(.*)\Z", re.DOTALL)
_POINT = re.compile(r"<point>\[\[\s*([+-]?\d+)\s*,\s*([+-]?\d+)\s*\]\]</point>\Z")
_BRACKET = re.compile(r"\[(.*)\]\Z", re.DOTALL)


def parse_action(text: str) -> UnifiedAction:
    if not isinstance(text, str) or not text.strip():
        raise EmptyInput("empty action string")
    head = _HEAD.match(text.strip())
    token, rest = head.group(1), head.group(2).strip()
    if token not in ActionKind.__members__:
        raise UnknownActionKind(f"unknown action kind {token!r}")
    kind = ActionKind[token]

    if kind in POINT_KINDS:
        m = _POINT.match(rest)
        if m is None:
            raise MalformedParameters(f"{token}: expected <point>[[x, y]]</point>, got {rest!r}")
        return UnifiedAction(kind, point=(int(m.group(1)), int(m.group(2)))).validate()

    if kind in TEXT_KINDS or kind in DIRECTION_KINDS:
        m = _BRACKET.match(rest)
        if m is None:
            raise MalformedParameters(f"{token}: expected [payload], got {rest!r}")
        payload = m.group(1)
        if kind in DIRECTION_KINDS:
            return UnifiedAction(kind, direction=payload.strip())
        return UnifiedAction(kind, text=payload)

    if rest:
        raise MalformedParameters(f"{token} takes no parameters, got {rest!r}")
    return UnifiedAction(kind)


def serialize_action(action: UnifiedAction) -> str:
    action.validate()
    k = action.kind.value
    if action.point is not None:
        return f"{k} <point>[[{action.point[0]}, {action.point[1]}]]</point>"
    if action.text is not None:
        return f"{k} [{action.text}]"
    if action.direction is not None:
        return f"{k} [{action.direction}]"
    return k


def hotkey_chord(keys: str) -> frozenset[str]:
    """Order-free key set: ``"ctrl + alt"`` and ``"ALT+CTRL"`` compare equal."""
    return frozenset(p.strip().upper() for p in keys.split("+") if p.strip())


# ---------------------------------------------------------------------------
# raw-action normalization
# ---------------------------------------------------------------------------

MAPPING_FILE = "raw_actions.map"


@dataclass(frozen=True)
class MappingRule:
    source: str
    native: str
    kind: str  # canonical kind name, or "SELECT" for the first half of select-then-copy
    transform: str


@dataclass(frozen=True)
class MappingTable:
    version: str
    rules: Mapping[tuple[str, str], MappingRule]

    def lookup(self, source: str, native: str) -> MappingRule:
        name = native.strip().lower()
        rule = self.rules.get((source, name)) or self.rules.get(("*", name))
        if rule is None:
            raise UnmappableAction(f"no mapping rule for {source}:{native}")
        return rule


def parse_mapping(text: str) -> MappingTable:
    version = "0"
    rules = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if line.startswith("#"):
            m = re.match(r"#\s*mapping-version:\s*(\S+)", line)
            if m:
                version = m.group(1)
            continue
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"mapping line {lineno}: expected 4 fields, got {len(parts)}")
        src, native, kind, transform = parts
        if kind != "SELECT":
            ActionKind(kind)
        rules[(src, native.lower())] = MappingRule(src, native.lower(), kind, transform)
    return MappingTable(version, rules)


@functools.lru_cache(maxsize=None)
def default_mapping() -> MappingTable:
    text = resources.files("gui_fedsim").joinpath("data", MAPPING_FILE).read_text(encoding="utf-8")
    return parse_mapping(text)


def load_mapping(path) -> MappingTable:
    return parse_mapping(Path(path).read_text(encoding="utf-8"))


def normalize_point(px: float, py: float, width: int, height: int) -> tuple[int, int]:
    """Native pixels to the 1000x1000 space, rounding half up."""
    if width <= 0 or height <= 0:
        raise MalformedParameters(f"bad screen size {width}x{height}")
    if not (0 <= px <= width and 0 <= py <= height):
        raise MalformedParameters(f"pixel ({px}, {py}) outside {width}x{height} screen")
    return (int(math.floor(COORD_MAX * px / width + 0.5)),
            int(math.floor(COORD_MAX * py / height + 0.5)))


def _screen(raw: Mapping) -> tuple[int, int]:
    if "screen" in raw:
        w, h = raw["screen"]
    else:
        w, h = raw.get("screen_w"), raw.get("screen_h")
    if w is None or h is None:
        raise MalformedParameters("pixel coordinates need screen_w/screen_h")
    return int(w), int(h)


def _apply(rule: MappingRule, raw: Mapping) -> UnifiedAction:
    kind = ActionKind(rule.kind)
    t = rule.transform
    try:
        if t == "none":
            return UnifiedAction(kind)
        if t == "point_px":
            w, h = _screen(raw)
            return UnifiedAction(kind, point=normalize_point(raw["x"], raw["y"], w, h))
        if t == "point_unit":
            x, y = float(raw["x"]), float(raw["y"])
            return UnifiedAction(kind, point=normalize_point(x, y, 1, 1)).validate()
        if t == "point_norm":
            return UnifiedAction(kind, point=(int(raw["x"]), int(raw["y"]))).validate()
        if t == "bbox_px":
            w, h = _screen(raw)
            x1, y1, x2, y2 = raw["bbox"]
            return UnifiedAction(kind, point=normalize_point((x1 + x2) / 2, (y1 + y2) / 2, w, h))
        if t == "text":
            return UnifiedAction(kind, text=str(raw["text"]))
        if t == "app_name":
            return UnifiedAction(kind, text=str(raw.get("app_name", raw.get("text"))))
        if t == "direction":
            return UnifiedAction(kind, direction=str(raw["direction"]))
        if t.startswith("dir:"):
            return UnifiedAction(kind, direction=t[4:])
        if t.startswith("key:"):
            return UnifiedAction(kind, text=t[4:])
        if t == "button_key":
            return UnifiedAction(kind, text=str(raw["button"]).upper())
        if t == "keys":
            keys = raw["keys"]
            if isinstance(keys, str):
                keys = keys.split("+")
            return UnifiedAction(kind, text="+".join(str(k).strip().upper() for k in keys))
    except KeyError as exc:
        raise MalformedParameters(f"{rule.native}: missing field {exc.args[0]!r}") from None
    raise UnmappableAction(f"unknown transform {t!r} in rule for {rule.native}")


def normalize_trajectory(raws: Sequence[Mapping], source: str,
                         table: MappingTable | None = None) -> list[UnifiedAction]:
    """Map a sequence of native actions, collapsing select-then-copy pairs."""
    table = table or default_mapping()
    out: list[UnifiedAction] = []
    i = 0
    while i < len(raws):
        raw = raws[i]
        rule = table.lookup(source, str(raw["action"]))
        if rule.kind == "SELECT":
            nxt = raws[i + 1] if i + 1 < len(raws) else None
            nrule = table.lookup(source, str(nxt["action"])) if nxt is not None else None
            if nrule is None or nrule.kind != ActionKind.COPY.value:
                raise UnmappableAction(f"{rule.native} not followed by a copy")
            text = nxt.get("text", raw.get("text"))
            if text is None:
                raise MalformedParameters("select-then-copy carries no text")
            out.append(UnifiedAction(ActionKind.COPY, text=str(text)))
            i += 2
            continue
        out.append(_apply(rule, raw))
        i += 1
    return out


def normalize_raw_action(raw, source: str, table: MappingTable | None = None) -> UnifiedAction:
    """Map one native action record (or one compound sequence) to a canonical action."""
    raws = [raw] if isinstance(raw, Mapping) else list(raw)
    actions = normalize_trajectory(raws, source, table)
    if len(actions) != 1:
        raise MalformedParameters(f"expected one canonical action, got {len(actions)}")
    return actions[0]
