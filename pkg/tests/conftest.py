import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=50, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from gui_fedsim.actions import ActionKind, UnifiedAction  # noqa: E402
from gui_fedsim.episodes import Episode, SourceTag, Step  # noqa: E402


def make_episode(eid, actions, source="AC", platform="MOBILE", instruction="open settings", **tag):
    steps = tuple(Step(i, f"img/{eid}/{i}.png", 1080, 1920, a) for i, a in enumerate(actions))
    return Episode(eid, instruction, SourceTag(source, platform, **tag), steps)


@pytest.fixture
def click():
    return UnifiedAction(ActionKind.CLICK, point=(101, 872))


@pytest.fixture
def small_corpus():
    out = []
    for i in range(12):
        acts = [UnifiedAction(ActionKind.CLICK, point=(10 * i, 20)),
                UnifiedAction(ActionKind.TYPE, text=f"query {i}"),
                UnifiedAction(ActionKind.COMPLETE)][: 1 + i % 3]
        out.append(make_episode(f"ep-{i:02d}", acts, device=f"dev-{i % 3}"))
    return out


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance" in rep.nodeid and rep.when == "call":
                props = dict(rep.user_properties)
                rows.append((rep.nodeid.split("::")[-1], outcome.upper(), props.get("result", "")))
    if rows:
        terminalreporter.section("acceptance criteria")
        for name, outcome, result in sorted(rows):
            terminalreporter.write_line(f"{'PASS' if outcome == 'PASSED' else 'FAIL'}  {name}: {result}")
