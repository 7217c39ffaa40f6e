"""Single-agent and group degrees of blameworthiness.

The group notion compares the base epistemic state against every alternative
state a coalition could bring about at finite cost.  Alternatives come from a
menu of option templates; an instance ``n`` of a template is available to a
coalition ``S`` when ``|S| >= n`` and the template's required agents are all
in ``S``, so availability only grows with ``S``.
"""

from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from groupblame.causal import (
    ENDOGENOUS,
    CausalModel,
    Finding,
    OutcomeFormula,
    check_formula,
    validate_model,
)
from groupblame.epistemics import (
    EpistemicState,
    FactoredState,
    models_of,
    prob,
    with_model,
)
from groupblame.errors import BalanceTooSmall, InvalidState, ScenarioError, SignatureMismatch
from groupblame.expressions import Expr, ExprError, Name, Num, eval_number, names_in

SIZE_SYMBOL = "n"
COALITION_SIZE = "size"
SOCIETY = "society"
BASELINE_ID = "baseline"
MONOTONICITY_TOLERANCE = 1e-9
EXHAUSTIVE_MONOTONICITY_LIMIT = 15


# -- menu -------------------------------------------------------------------


@dataclass(frozen=True)
class ShiftMarginal:
    """Add ``delta`` to P(var = value), clamped to [0, 1]; other values rescale."""

    var: str
    value: str
    delta: Expr


@dataclass(frozen=True)
class SetMarginal:
    var: str
    dist: Mapping[str, Expr]


@dataclass(frozen=True)
class SetAction:
    """Fix an action variable to ``value`` in every model of the state."""

    var: str
    value: str


Effect = Union[ShiftMarginal, SetMarginal, SetAction]


@dataclass(frozen=True)
class OptionTemplate:
    name: str
    cost: Expr
    effects: tuple[Effect, ...] = ()
    size: tuple[int, int] | None = None
    required_agents: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "effects", tuple(self.effects))
        object.__setattr__(self, "required_agents", frozenset(self.required_agents))
        if self.size is not None:
            object.__setattr__(self, "size", (int(self.size[0]), int(self.size[1])))

    def sizes(self) -> list[int | None]:
        if self.size is None:
            return [None]
        lo, hi = self.size
        return list(range(lo, hi + 1))

    def instance_id(self, n: int | None) -> str:
        return self.name if n is None else f"{self.name}({n})"


_natural = re.compile(r"(\d+)")


def natural_key(name: str):
    return [int(p) if p.isdigit() else p for p in _natural.split(name)]


@dataclass(frozen=True)
class Scenario:
    """Everything needed to ascribe blame: agents, E1, phi, menu, costs and N."""

    name: str
    agents: tuple[str, ...]
    base_state: EpistemicState
    outcome: OutcomeFormula
    menu: tuple[OptionTemplate, ...]
    balance: float
    baseline_cost: Expr = Num(0)
    params: Mapping[str, float] = field(default_factory=dict)
    focal: str = SOCIETY
    focal_counts_toward_n: bool = True

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(sorted(self.agents, key=natural_key)))
        object.__setattr__(self, "menu", tuple(self.menu))
        object.__setattr__(self, "params", dict(self.params))

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def full_mask(self) -> int:
        return (1 << len(self.agents)) - 1

    @cached_property
    def agent_index(self) -> dict[str, int]:
        return {a: i for i, a in enumerate(self.agents)}

    def mask_of(self, agents: Iterable[str]) -> int:
        mask = 0
        for a in agents:
            if a not in self.agent_index:
                raise ScenarioError(f"unknown agent {a!r}")
            mask |= 1 << self.agent_index[a]
        return mask

    def members(self, mask: int) -> list[str]:
        return [a for i, a in enumerate(self.agents) if mask >> i & 1]

    @cached_property
    def base_probability(self) -> float:
        return prob(self.base_state, None, self.outcome).value

    @cached_property
    def candidates(self) -> tuple["Candidate", ...]:
        """Every finite-cost option instance, in menu order; baseline first."""
        out = [Candidate(BASELINE_ID, None, None, float("nan"), self.base_state, 0, ())]
        out[0].probability = self.base_probability
        for template in self.menu:
            req = self.mask_of(template.required_agents)
            for n in template.sizes():
                cost = instance_cost(self, template, n)
                if math.isinf(cost):
                    continue
                state = apply_effects(self.base_state, template.effects, self.bindings(n))
                cand = Candidate(template.instance_id(n), template.name, n, cost, state, req,
                                 template.effects)
                cand.probability = prob(state, None, self.outcome).value
                out.append(cand)
        return tuple(out)

    def bindings(self, n: int | None = None, size: int | None = None) -> dict[str, float]:
        b = dict(self.params)
        if n is not None:
            b[SIZE_SYMBOL] = n
        if size is not None:
            b[COALITION_SIZE] = size
        return b

    def baseline_cost_at(self, size: int) -> float:
        return eval_number(self.baseline_cost, self.bindings(size=size))

    @cached_property
    def focal_bit(self) -> int:
        return 1 << self.agent_index[self.focal] if self.focal in self.agent_index else 0

    def counted_size(self, mask: int) -> int:
        if not self.focal_counts_toward_n:
            mask &= ~self.focal_bit
        return bin(mask).count("1")

    def check_balance(self) -> None:
        worst = self.max_finite_cost()
        if not self.balance > worst:
            raise BalanceTooSmall(f"N = {self.balance!r} must exceed every finite cost (max {worst!r})")

    def max_finite_cost(self) -> float:
        costs = [c.cost for c in self.candidates[1:]]
        costs += [self.baseline_cost_at(k) for k in range(self.n_agents + 1)]
        finite = [c for c in costs if math.isfinite(c)]
        return max(finite, default=0.0)


@dataclass(eq=False)
class Candidate:
    """An alternative epistemic state E2 together with its cost."""

    id: str
    template: str | None
    n: int | None
    cost: float
    state: EpistemicState
    required_mask: int
    effects: tuple[Effect, ...]
    probability: float = float("nan")

    @property
    def is_baseline(self) -> bool:
        return self.template is None


def instance_cost(scenario: Scenario, template: OptionTemplate, n: int | None) -> float:
    cost = eval_number(template.cost, scenario.bindings(n))
    if math.isnan(cost) or cost < 0:
        raise ScenarioError(f"option {template.instance_id(n)} has invalid cost {cost!r}")
    return cost


# -- effects ----------------------------------------------------------------


def _shift(dist: dict[str, float], value: str, delta: float) -> dict[str, float]:
    old = dist[value]
    new = min(1.0, max(0.0, old + delta))
    others = [v for v in dist if v != value]
    out = dict(dist)
    out[value] = new
    if not others:
        out[value] = 1.0
        return out
    rest = 1.0 - new
    if len(others) == 1:
        out[others[0]] = rest
        return out
    old_rest = math.fsum(dist[v] for v in others)
    for v in others:
        out[v] = rest * (dist[v] / old_rest if old_rest > 0 else 1.0 / len(others))
    return out


def apply_effects(state: EpistemicState, effects: Sequence[Effect],
                  bindings: Mapping[str, float]) -> EpistemicState:
    """The epistemic state reached by carrying out ``effects`` on ``state``."""
    marginal_effects = [e for e in effects if isinstance(e, (ShiftMarginal, SetMarginal))]
    if marginal_effects and not isinstance(state, FactoredState):
        raise ScenarioError("marginal effects need a factored epistemic state")
    if isinstance(state, FactoredState) and marginal_effects:
        marginals = {k: dict(v) for k, v in state.marginals.items()}
        for eff in marginal_effects:
            if isinstance(eff, ShiftMarginal):
                marginals[eff.var] = _shift(marginals[eff.var], eff.value,
                                            eval_number(eff.delta, bindings))
            else:
                marginals[eff.var] = {v: eval_number(p, bindings) for v, p in eff.dist.items()}
        state = FactoredState(state.model, marginals)
    actions = [e for e in effects if isinstance(e, SetAction)]
    if actions:
        def fix(model: CausalModel) -> CausalModel:
            for eff in actions:
                model = model.replace_equation(eff.var, Name(eff.value))
            return model
        state = with_model(state, fix)
    return state


# -- validation -------------------------------------------------------------


def validate_scenario(scenario: Scenario) -> list[Finding]:
    """Scenario-level invariants, including model validity and N > every cost."""
    out: list[Finding] = []

    def add(cat, names, msg):
        out.append(Finding(cat, tuple(names), msg))

    if not scenario.agents:
        add("no_agents", [], "a scenario needs at least one agent")
    if len(set(scenario.agents)) != len(scenario.agents):
        add("duplicate_agent", [], "agent names must be unique")
    for model in models_of(scenario.base_state):
        out.extend(validate_model(model).findings)
        for action, agent in model.signature.agent_of.items():
            if agent not in scenario.agents:
                add("unknown_agent", [action, agent], f"action {action} belongs to unknown agent {agent!r}")
    if out:
        return out
    model = scenario.base_state.reference_model
    variables = model.signature.variables
    try:
        check_formula(model, scenario.outcome)
    except SignatureMismatch as exc:
        add("bad_outcome", [], str(exc))
    if scenario.focal != SOCIETY and scenario.focal not in scenario.agents:
        add("unknown_agent", [scenario.focal], "focal agent is not a scenario agent")
    for reserved in (SIZE_SYMBOL, COALITION_SIZE):
        if reserved in scenario.params:
            add("reserved_param", [reserved], f"{reserved!r} is reserved")
    bad_balance = not (scenario.balance > 0 and math.isfinite(scenario.balance))
    if bad_balance:
        add("bad_balance", [], "N must be a positive finite number")

    bound = set(scenario.params)
    for unknown in sorted(names_in(scenario.baseline_cost) - bound - {COALITION_SIZE}):
        add("unbound_name", [unknown], "baseline cost mentions an unbound name")
    seen_names: set[str] = set()
    for template in scenario.menu:
        where = [template.name]
        if template.name in seen_names:
            add("duplicate_option", where, "option names must be unique")
        seen_names.add(template.name)
        if template.size is not None and not (0 <= template.size[0] <= template.size[1]):
            add("bad_size_range", where, f"size range {template.size} is invalid")
        local = bound | ({SIZE_SYMBOL} if template.size is not None else set())
        for unknown in sorted(names_in(template.cost) - local):
            add("unbound_name", where + [unknown], f"cost mentions unbound name {unknown!r}")
        for agent in sorted(template.required_agents):
            if agent not in scenario.agents:
                add("unknown_agent", where + [agent], "required agent is not a scenario agent")
        for eff in template.effects:
            var = variables.get(eff.var)
            if var is None:
                add("unknown_variable", where + [eff.var], "effect targets an unknown variable")
                continue
            if isinstance(eff, SetAction):
                if var.kind != ENDOGENOUS or eff.var not in model.signature.agent_of:
                    add("not_an_action", where + [eff.var], "set targets a non-action variable")
                if eff.value not in var.range:
                    add("value_out_of_range", where + [eff.var], f"{eff.value!r} not in range")
                continue
            if var.kind == ENDOGENOUS:
                add("not_exogenous", where + [eff.var], "marginal effects need an exogenous variable")
            if not isinstance(scenario.base_state, FactoredState):
                add("needs_factored_state", where, "marginal effects need a factored state")
            exprs = [eff.delta] if isinstance(eff, ShiftMarginal) else list(eff.dist.values())
            values = [eff.value] if isinstance(eff, ShiftMarginal) else list(eff.dist)
            for value in values:
                if value not in var.range:
                    add("value_out_of_range", where + [eff.var], f"{value!r} not in range")
            for e in exprs:
                for unknown in sorted(names_in(e) - local):
                    add("unbound_name", where + [unknown], f"effect mentions unbound name {unknown!r}")
    if out:
        return out
    try:
        scenario.candidates
        worst = scenario.max_finite_cost()
    except (ScenarioError, ExprError, InvalidState) as exc:
        add("bad_option", [], str(exc))
        return out
    if not bad_balance and not scenario.balance > worst:
        add("balance_too_small", [], f"N = {scenario.balance!r} must exceed every finite cost (max {worst!r})")
    return out


# -- single agent -----------------------------------------------------------


def delta_single(state: EpistemicState, action: str, a: str, a_alt: str,
                 phi: OutcomeFormula) -> float:
    """How much more likely ``phi`` is under action ``a`` than under ``a_alt``."""
    p = prob(state, {action: a}, phi).value
    p_alt = prob(state, {action: a_alt}, phi).value
    return max(0.0, p - p_alt)


def _check_costs(costs: Mapping[str, float], balance: float) -> None:
    worst = max(costs.values())
    if not balance > worst:
        raise BalanceTooSmall(f"N = {balance!r} must exceed every action cost (max {worst!r})")


def db_single(state: EpistemicState, costs: Mapping[str, float], balance: float, action: str,
              a: str, a_alt: str, phi: OutcomeFormula) -> float:
    _check_costs(costs, balance)
    delta = delta_single(state, action, a, a_alt, phi)
    return delta * (balance - max(costs[a_alt] - costs[a], 0.0)) / balance


def db_single_max(state: EpistemicState, costs: Mapping[str, float], balance: float,
                  action: str, a: str, phi: OutcomeFormula) -> tuple[float, str]:
    """Maximise :func:`db_single` over alternatives; ties go to range order."""
    _check_costs(costs, balance)
    var = state.reference_model.signature.variables[action]
    best, arg = -1.0, a
    for alt in var.range:
        value = db_single(state, costs, balance, action, a, alt, phi)
        if value > best:
            best, arg = value, alt
    return best, arg


# -- group ------------------------------------------------------------------


def delta_group(e1: EpistemicState, e2: EpistemicState, phi: OutcomeFormula) -> float:
    return max(0.0, prob(e1, None, phi).value - prob(e2, None, phi).value)


@dataclass(frozen=True)
class GroupBlame:
    value: float
    argmax: str
    delta: float
    cost: float


Coalition = Union[int, Iterable[str]]


def as_mask(scenario: Scenario, coalition: Coalition) -> int:
    if isinstance(coalition, (int, np.integer)):
        mask = int(coalition)
        if mask < 0 or mask > scenario.full_mask:
            raise ScenarioError(f"coalition mask {mask} outside the scenario's agents")
        return mask
    return scenario.mask_of(coalition)


def is_available(scenario: Scenario, cand: Candidate, mask: int) -> bool:
    if cand.is_baseline:
        return True
    # the empty group can bring nothing about, so its blame is 0
    if mask == 0 or cand.required_mask & ~mask:
        return False
    return cand.n is None or cand.n <= scenario.counted_size(mask)


def instantiate_menu(scenario: Scenario, coalition: Coalition) -> list[Candidate]:
    """The candidates a coalition can bring about, baseline first."""
    mask = as_mask(scenario, coalition)
    out = [c for c in scenario.candidates if is_available(scenario, c, mask)]
    base = out[0]
    size = bin(mask).count("1")
    # the baseline's cost is c(S, E1), which may depend on the coalition size
    out[0] = Candidate(base.id, None, None, scenario.baseline_cost_at(size), base.state, 0, (),
                       base.probability)
    return out


def gb_relative(scenario: Scenario, coalition: Coalition, candidate: Candidate) -> float:
    scenario.check_balance()
    mask = as_mask(scenario, coalition)
    c1 = scenario.baseline_cost_at(bin(mask).count("1"))
    cost = c1 if candidate.is_baseline else candidate.cost
    delta = max(0.0, scenario.base_probability - candidate.probability)
    return delta * (scenario.balance - max(cost - c1, 0.0)) / scenario.balance


def gb(scenario: Scenario, coalition: Coalition) -> GroupBlame:
    """Group blameworthiness of a coalition: the best relative value over its menu."""
    scenario.check_balance()
    mask = as_mask(scenario, coalition)
    c1 = scenario.baseline_cost_at(bin(mask).count("1"))
    n_big = scenario.balance
    p1 = scenario.base_probability
    best = GroupBlame(0.0, BASELINE_ID, 0.0, c1)
    for cand in scenario.candidates[1:]:
        if not is_available(scenario, cand, mask):
            continue
        delta = max(0.0, p1 - cand.probability)
        value = delta * (n_big - max(cand.cost - c1, 0.0)) / n_big
        if value > best.value:
            best = GroupBlame(value, cand.id, delta, cand.cost)
    return best


def _popcounts(m: int) -> np.ndarray:
    masks = np.arange(1 << m, dtype=np.int64)
    counts = np.zeros(1 << m, dtype=np.int64)
    for i in range(m):
        counts += (masks >> i) & 1
    return counts


def gb_table(scenario: Scenario, threads: int | None = None) -> tuple[np.ndarray, list[str]]:
    """``gb`` for every coalition mask at once, plus the argmax option ids.

    Vectorised over masks; ``threads`` splits the candidate loop across workers
    and the per-candidate columns are reduced in menu order, so the result does
    not depend on scheduling.
    """
    scenario.check_balance()
    m = scenario.n_agents
    masks = np.arange(1 << m, dtype=np.int64)
    sizes = _popcounts(m)
    counted = sizes - (((masks & scenario.focal_bit) != 0).astype(np.int64)
                       if not scenario.focal_counts_toward_n else 0)
    c1_by_size = np.array([scenario.baseline_cost_at(k) for k in range(m + 1)])
    c1 = c1_by_size[sizes]
    n_big = scenario.balance
    p1 = scenario.base_probability
    cands = scenario.candidates[1:]

    def column(cand: Candidate) -> np.ndarray:
        avail = ((masks & cand.required_mask) == cand.required_mask) & (masks != 0)
        if cand.n is not None:
            avail &= counted >= cand.n
        delta = max(0.0, p1 - cand.probability)
        value = delta * (n_big - np.maximum(cand.cost - c1, 0.0)) / n_big
        return np.where(avail, value, 0.0)

    if threads and threads > 1 and len(cands) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cols = list(pool.map(column, cands))
    else:
        cols = [column(c) for c in cands]
    stacked = np.vstack([np.zeros(1 << m)] + cols)
    # argmax returns the first maximum, which is the menu-order tie-break
    best = np.argmax(stacked, axis=0)
    values = stacked[best, masks]
    ids = [scenario.candidates[i].id for i in range(len(scenario.candidates))]
    return values, [ids[i] for i in best]


# -- monotonicity -----------------------------------------------------------


@dataclass
class MonotonicityReport:
    method: str
    violations: list[tuple[int, int, float, float]] = field(default_factory=list)
    total_violations: int = 0
    checked: int = 0

    @property
    def ok(self) -> bool:
        return self.total_violations == 0


def subset_max(values: np.ndarray, m: int) -> np.ndarray:
    """``out[T] = max over S ⊆ T of values[S]`` (sum-over-subsets style DP)."""
    out = values.copy()
    masks = np.arange(1 << m)
    for i in range(m):
        bit = 1 << i
        has = (masks & bit) != 0
        out[has] = np.maximum(out[has], out[masks[has] ^ bit])
    return out


def validate_monotonicity(scenario: Scenario, tolerance: float = MONOTONICITY_TOLERANCE,
                          limit: int = 1000, samples: int = 20000, seed: int = 0,
                          threads: int | None = None) -> MonotonicityReport:
    """List coalition pairs ``S ⊆ T`` with ``gb(S) > gb(T) + tolerance``."""
    m = scenario.n_agents
    if m <= EXHAUSTIVE_MONOTONICITY_LIMIT:
        values, _ = gb_table(scenario, threads)
        report = MonotonicityReport("exhaustive", checked=3**m)
        closure = subset_max(values, m)
        for t in np.flatnonzero(closure > values + tolerance):
            t = int(t)
            s = t
            while True:
                s = (s - 1) & t
                if values[s] > values[t] + tolerance:
                    report.total_violations += 1
                    if len(report.violations) < limit:
                        report.violations.append((s, t, float(values[s]), float(values[t])))
                if s == 0:
                    break
        return report
    rng = np.random.default_rng(seed)
    report = MonotonicityReport("sampled", checked=samples)
    memo: dict[int, float] = {}

    def value(mask: int) -> float:
        if mask not in memo:
            memo[mask] = gb(scenario, mask).value
        return memo[mask]

    for _ in range(samples):
        t = int(rng.integers(0, 1 << m))
        s = t & int(rng.integers(0, 1 << m))
        if value(s) > value(t) + tolerance:
            report.total_violations += 1
            if len(report.violations) < limit:
                report.violations.append((s, t, value(s), value(t)))
    return report


def instantiate_all(scenario: Scenario) -> list[Candidate]:
    return instantiate_menu(scenario, scenario.full_mask)


__all__ = [
    "Candidate", "Effect", "GroupBlame", "MonotonicityReport", "OptionTemplate", "Scenario",
    "SetAction", "SetMarginal", "ShiftMarginal", "apply_effects", "as_mask", "db_single",
    "db_single_max", "delta_group", "delta_single", "gb", "gb_relative", "gb_table",
    "instantiate_all", "instantiate_menu", "natural_key", "subset_max", "validate_monotonicity",
    "validate_scenario",
]
