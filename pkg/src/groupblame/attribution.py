"""Apportion group blame to individual agents with the Shapley value.

The coalition function ``v(S) = gb(S)`` is materialised as an array indexed by
coalition bitmask (bit ``i`` is ``scenario.agents[i]``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from groupblame.blame import (
    Scenario,
    as_mask,
    gb,
    gb_table,
    subset_max,
    validate_monotonicity,
)
from groupblame.epistemics import make_rng, with_model
from groupblame.errors import InvalidSampleCount, NotABijection, TooManyAgents

MAX_MATERIALISED_AGENTS = 20
MAX_AXIOM_AGENTS = 12
EFFICIENCY_TOLERANCE = 1e-9
SYMMETRY_TOLERANCE = 1e-9
DUMMY_TOLERANCE = 1e-12


@dataclass(frozen=True)
class CoalitionGame:
    agents: tuple[str, ...]
    values: np.ndarray
    argmax: tuple[str, ...] = ()

    @property
    def n_players(self) -> int:
        return len(self.agents)

    def value(self, mask: int) -> float:
        return float(self.values[mask])

    def index(self, agent: str) -> int:
        return self.agents.index(agent)

    @property
    def grand_value(self) -> float:
        return float(self.values[-1])


@dataclass
class AttributionResult:
    agents: tuple[str, ...]
    values: np.ndarray
    method: str
    grand_value: float
    stderr: np.ndarray = None
    n_permutations: int = 0
    seed: int | None = None
    efficiency_residual: float = field(init=False)

    def __post_init__(self):
        if self.stderr is None:
            self.stderr = np.zeros(len(self.agents))
        self.efficiency_residual = abs(math.fsum(self.values.tolist()) - self.grand_value)

    def __getitem__(self, agent: str) -> float:
        return float(self.values[self.agents.index(agent)])

    def as_dict(self) -> dict[str, float]:
        return {a: float(v) for a, v in zip(self.agents, self.values)}


def coalition_values(scenario: Scenario, threads: int | None = None,
                     repair: bool = False) -> CoalitionGame:
    """Materialise ``v(S) = gb(S)`` for every coalition.

    With ``repair`` the game is replaced by its monotone closure
    ``v*(S) = max over S' ⊆ S of v(S')``.
    """
    m = scenario.n_agents
    if m > MAX_MATERIALISED_AGENTS:
        raise TooManyAgents(f"{m} agents is too many to materialise; use shapley_sampled")
    values, argmax = gb_table(scenario, threads)
    if repair:
        values = subset_max(values, m)
    return CoalitionGame(scenario.agents, values, tuple(argmax))


def game_from_values(agents: Sequence[str], values: Sequence[float]) -> CoalitionGame:
    values = np.asarray(values, dtype=float)
    if values.shape != (1 << len(agents),):
        raise ValueError("need one value per coalition mask")
    return CoalitionGame(tuple(agents), values)


def marginal_contribution(game: CoalitionGame, agent: str, coalition: int) -> float:
    """Change in value from agent's membership, whichever side of it ``coalition`` is on."""
    bit = 1 << game.index(agent)
    if coalition & bit:
        return game.value(coalition) - game.value(coalition & ~bit)
    return game.value(coalition | bit) - game.value(coalition)


def _popcounts(m: int) -> np.ndarray:
    masks = np.arange(1 << m, dtype=np.int64)
    counts = np.zeros(1 << m, dtype=np.int64)
    for i in range(m):
        counts += (masks >> i) & 1
    return counts


def shapley_weights(m: int) -> np.ndarray:
    """``w[k] = (k-1)! (m-k)! / m!`` for coalitions of size ``k`` containing the agent."""
    w = np.zeros(m + 1)
    for k in range(1, m + 1):
        if m <= 15:
            w[k] = math.factorial(k - 1) * math.factorial(m - k) / math.factorial(m)
        else:
            w[k] = math.exp(math.lgamma(k) + math.lgamma(m - k + 1) - math.lgamma(m + 1))
    return w


def shapley_exact(game: CoalitionGame) -> AttributionResult:
    """Closed-form Shapley value: weighted marginal contributions over all coalitions."""
    m = game.n_players
    if m > MAX_MATERIALISED_AGENTS:
        raise TooManyAgents(f"{m} agents is too many for exact attribution")
    masks = np.arange(1 << m, dtype=np.int64)
    weights = shapley_weights(m)[_popcounts(m)]
    out = np.zeros(m)
    for j in range(m):
        bit = 1 << j
        members = masks[(masks & bit) != 0]
        contrib = weights[members] * (game.values[members] - game.values[members ^ bit])
        out[j] = math.fsum(contrib.tolist())
    return AttributionResult(game.agents, out, "exact", game.grand_value)


def shapley_sampled(scenario: Scenario, n_permutations: int, seed: int,
                    game: CoalitionGame | None = None) -> AttributionResult:
    """Permutation-sampling estimate of the Shapley value.

    Coalition values are computed on demand and memoised, so only the
    coalitions that actually occur as prefixes of sampled orderings are
    evaluated.
    """
    if n_permutations < 1:
        raise InvalidSampleCount("n_permutations must be at least 1")
    m = scenario.n_agents
    rng = make_rng(seed)
    orders = np.argsort(rng.random((n_permutations, m)), axis=1)
    bits = (np.int64(1) << orders.astype(np.int64))
    prefix = np.cumsum(bits, axis=1)
    before = prefix - bits
    needed = np.unique(np.concatenate([prefix.ravel(), before.ravel()]))
    if game is not None:
        lookup = game.values
        values_at = lambda arr: lookup[arr]  # noqa: E731
    else:
        memo: dict[int, float] = {}
        for mask in needed.tolist():
            if mask not in memo:
                memo[mask] = gb(scenario, mask).value
        table = np.array([memo[k] for k in needed.tolist()])
        values_at = lambda arr: table[np.searchsorted(needed, arr)]  # noqa: E731
    contrib = values_at(prefix) - values_at(before)
    samples = np.zeros((n_permutations, m))
    np.put_along_axis(samples, orders, contrib, axis=1)
    mean = samples.mean(axis=0)
    if n_permutations > 1:
        stderr = samples.std(axis=0, ddof=1) / math.sqrt(n_permutations)
    else:
        stderr = np.zeros(m)
    grand = values_at(np.array([scenario.full_mask]))[0]
    return AttributionResult(scenario.agents, mean, "sampled", float(grand), stderr,
                             n_permutations, seed)


# -- symmetry ---------------------------------------------------------------


def _check_bijection(scenario: Scenario, pi: Mapping[str, str]) -> None:
    agents = set(scenario.agents)
    if set(pi) != agents or set(pi.values()) != agents:
        raise NotABijection("permutation must map the scenario's agents onto themselves")


def permute_scenario(scenario: Scenario, pi: Mapping[str, str]) -> Scenario:
    """Reassign every agent-indexed piece of ``scenario`` from agent ``i`` to ``pi[i]``."""
    pi = dict(pi)
    _check_bijection(scenario, pi)
    state = with_model(scenario.base_state, lambda model: model.relabel_agents(pi))
    menu = tuple(replace(t, required_agents=frozenset(pi[a] for a in t.required_agents))
                 for t in scenario.menu)
    return replace(scenario, base_state=state, menu=menu, focal=pi.get(scenario.focal, scenario.focal))


def invert(pi: Mapping[str, str]) -> dict[str, str]:
    return {v: k for k, v in pi.items()}


def probe_permutations(agents: Sequence[str], count: int, seed: int = 0) -> list[dict[str, str]]:
    """Reversal, a cyclic shift, then seeded random permutations."""
    agents = list(agents)
    out = [dict(zip(agents, reversed(agents))), dict(zip(agents, agents[1:] + agents[:1]))]
    rng = make_rng(seed, stream=7)
    while len(out) < count:
        out.append(dict(zip(agents, [agents[i] for i in rng.permutation(len(agents))])))
    return out[:count]


def symmetry_deviation(scenario: Scenario, pi: Mapping[str, str],
                       base: AttributionResult | None = None) -> float:
    if base is None:
        base = shapley_exact(coalition_values(scenario))
    permuted = shapley_exact(coalition_values(permute_scenario(scenario, pi)))
    return max(abs(base[a] - permuted[pi[a]]) for a in scenario.agents)


# -- axioms -----------------------------------------------------------------


@dataclass
class AxiomReport:
    efficiency_residual: float
    symmetry_deviation: float
    dummy_agents: list[str]
    dummy_max_abs: float
    monotone: bool
    min_value: float
    attribution: AttributionResult
    notes: list[str] = field(default_factory=list)

    def passed(self, tolerance: float = EFFICIENCY_TOLERANCE) -> bool:
        return (self.efficiency_residual <= tolerance
                and self.symmetry_deviation <= tolerance
                and self.dummy_max_abs <= DUMMY_TOLERANCE
                and (not self.monotone or self.min_value >= -DUMMY_TOLERANCE))


def dummy_agents(game: CoalitionGame, tolerance: float = DUMMY_TOLERANCE) -> list[str]:
    masks = np.arange(1 << game.n_players, dtype=np.int64)
    out = []
    for j, agent in enumerate(game.agents):
        bit = 1 << j
        members = masks[(masks & bit) != 0]
        if np.all(np.abs(game.values[members] - game.values[members ^ bit]) <= tolerance):
            out.append(agent)
    return out


def check_axioms(scenario: Scenario, probes: int = 6, seed: int = 0,
                 threads: int | None = None) -> AxiomReport:
    """Efficiency residual, symmetry probes and the dummy property for ``scenario``."""
    if scenario.n_agents > MAX_AXIOM_AGENTS:
        raise TooManyAgents(f"axiom checks support at most {MAX_AXIOM_AGENTS} agents")
    game = coalition_values(scenario, threads)
    result = shapley_exact(game)
    sym = 0.0
    for pi in probe_permutations(scenario.agents, probes, seed):
        sym = max(sym, symmetry_deviation(scenario, pi, result))
    dummies = dummy_agents(game)
    dummy_max = max((abs(result[a]) for a in dummies), default=0.0)
    mono = validate_monotonicity(scenario, threads=threads).ok
    notes = []
    if not mono:
        notes.append("coalition values are not monotone; non-negativity is not guaranteed")
    return AxiomReport(result.efficiency_residual, sym, dummies, dummy_max, mono,
                       float(result.values.min()) if len(result.values) else 0.0, result, notes)


@dataclass
class StrongMonotonicityCheck:
    agent: str
    premise: bool
    conclusion: bool
    db_first: float
    db_second: float
    worst_gap: float

    @property
    def holds(self) -> bool:
        return not self.premise or self.conclusion


def check_strong_monotonicity(first: Scenario, second: Scenario, agent: str,
                              tolerance: float = DUMMY_TOLERANCE) -> StrongMonotonicityCheck:
    """If ``agent``'s marginal contributions in ``first`` dominate those in ``second``
    on every coalition, its Shapley value in ``first`` must be at least as large."""
    if first.agents != second.agents:
        raise ValueError("both scenarios must have the same agents")
    g1, g2 = coalition_values(first), coalition_values(second)
    m = g1.n_players
    bit = 1 << g1.index(agent)
    masks = np.arange(1 << m, dtype=np.int64)
    members = masks[(masks & bit) != 0]
    mb1 = g1.values[members] - g1.values[members ^ bit]
    mb2 = g2.values[members] - g2.values[members ^ bit]
    gap = float(np.min(mb1 - mb2))
    premise = gap >= -tolerance
    db1, db2 = shapley_exact(g1)[agent], shapley_exact(g2)[agent]
    return StrongMonotonicityCheck(agent, premise, db1 >= db2 - tolerance, db1, db2, gap)


def attribute(scenario: Scenario, method: str = "exact", n_permutations: int = 20000,
              seed: int = 0, threads: int | None = None, repair: bool = False) -> AttributionResult:
    """Convenience front door used by the CLI."""
    if method == "exact":
        return shapley_exact(coalition_values(scenario, threads, repair))
    if method == "sampled":
        game = coalition_values(scenario, threads, repair) if repair else None
        return shapley_sampled(scenario, n_permutations, seed, game)
    raise ValueError(f"unknown attribution method {method!r}")


__all__ = [
    "AttributionResult", "AxiomReport", "CoalitionGame", "StrongMonotonicityCheck", "as_mask",
    "attribute", "check_axioms", "check_strong_monotonicity", "coalition_values", "dummy_agents",
    "game_from_values", "invert", "marginal_contribution", "permute_scenario",
    "probe_permutations", "shapley_exact", "shapley_sampled", "shapley_weights",
    "symmetry_deviation",
]
