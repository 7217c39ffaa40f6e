"""Built-in scenarios shipped as ``.blame`` files, with their expected values.

Every built-in carries an :class:`Expectation` list so ``demo`` can check a
run against known numbers without the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources

from groupblame.blame import Scenario
from groupblame.dsl import parse_with_diagnostics
from groupblame.errors import ScenarioError, UnknownScenario


@dataclass(frozen=True)
class Expectation:
    """One expected number: ``kind`` is group_gb, shapley, argmax or probability."""

    kind: str
    expected: float | str
    tolerance: float = 0.0
    agent: str | None = None
    note: str = ""


_GROUP_TOL = 1e-3
_SHAPLEY_TOL = 5e-3

EXPECTATIONS: dict[str, tuple[Expectation, ...]] = {
    "committee_a1": (
        Expectation("group_gb", 0.390, _GROUP_TOL),
        Expectation("argmax", "pressure(7)"),
        Expectation("shapley", 0.073, _SHAPLEY_TOL, "a1"),
        Expectation("probability", 0.45568, 1e-9, note="P(Pass = no) in the base state"),
    ),
    "committee_a2": (Expectation("shapley", 0.120, _SHAPLEY_TOL, "a2"),),
    "committee_a3": (
        Expectation("group_gb", 0.317, _GROUP_TOL),
        Expectation("shapley", 0.079, _SHAPLEY_TOL, "a3"),
    ),
    "committee_a4": (
        Expectation("group_gb", 0.361, _GROUP_TOL),
        Expectation("argmax", "pressure(6)"),
        Expectation("shapley", 0.068, _SHAPLEY_TOL, "a4"),
    ),
    "committee_a5": (
        Expectation("group_gb", 0.560, _GROUP_TOL),
        Expectation("shapley", 0.125, _SHAPLEY_TOL, "a5"),
    ),
    "committee_a6": (
        Expectation("group_gb", 0.157, _GROUP_TOL),
        Expectation("argmax", "pressure(6)"),
        Expectation("shapley", 0.022, _SHAPLEY_TOL, "a6"),
    ),
    "commons_coordinable": (
        Expectation("group_gb_at_least", 0.5, note="coordination is possible and cheap"),
    ),
    "commons_blocked": (
        Expectation("group_gb", 0.0, 0.0),
        Expectation("all_shapley", 0.0, 0.0),
    ),
    "single_agent_demo": (
        Expectation("group_gb", 0.216, 1e-12),
        Expectation("argmax", "inspect"),
    ),
}


def available() -> list[str]:
    return sorted(EXPECTATIONS)


@lru_cache(maxsize=None)
def source(name: str) -> str:
    if name not in EXPECTATIONS:
        raise UnknownScenario(name, available())
    return resources.files("groupblame").joinpath("scenarios", f"{name}.blame").read_text("utf-8")


@lru_cache(maxsize=None)
def builtin(name: str) -> Scenario:
    """The named built-in scenario; raises :class:`UnknownScenario` on a miss."""
    scenario, diags = parse_with_diagnostics(source(name))
    if scenario is None:
        raise ScenarioError(f"built-in {name} does not parse: " + "; ".join(map(str, diags)))
    return scenario


def expectations(name: str) -> tuple[Expectation, ...]:
    if name not in EXPECTATIONS:
        raise UnknownScenario(name, available())
    return EXPECTATIONS[name]


MENU_VARIANTS = (
    ("switch-only on, focal counts", True, True),
    ("switch-only on, focal not counted", True, False),
    ("switch-only off, focal counts", False, True),
    ("switch-only off, focal not counted", False, False),
)


def menu_variant(scenario: Scenario, switch_only: bool, focal_counts: bool) -> Scenario:
    """Re-read ``scenario`` under one of the four sub-coalition menu readings.

    ``switch_only=False`` drops the bare switch (``n = 0``) so switching always
    comes with some pressure; ``focal_counts=False`` stops the focal agent from
    counting towards the head count ``n``.
    """
    menu = []
    for t in scenario.menu:
        if not switch_only and t.size is not None and t.size[0] == 0:
            t = replace(t, size=(1, t.size[1]))
        menu.append(t)
    return replace(scenario, menu=tuple(menu), focal_counts_toward_n=focal_counts)
