"""The canonical two-part system prompt, rendered as plain text.

The text lives in ``data/system_prompt_part{1,2}.txt`` and is returned
byte-for-byte.
"""
from __future__ import annotations

import re
from functools import lru_cache
from importlib.resources import files


@lru_cache(maxsize=None)
def _part(n: int) -> str:
    return files("gui_fedsim").joinpath("data", f"system_prompt_part{n}.txt").read_text(encoding="utf-8")


PART_I = _part(1)
PART_II = _part(2)

_ENUMERATED = re.compile(r"^- (?:Basic|Custom) Action \d+: ([A-Z_]+)$", re.MULTILINE)


def render_system_prompt() -> str:
    return PART_I + "\n" + PART_II


def prompt_action_names(prompt: str | None = None) -> list[str]:
    """Action names enumerated in the prompt, in order."""
    return _ENUMERATED.findall(prompt if prompt is not None else render_system_prompt())
