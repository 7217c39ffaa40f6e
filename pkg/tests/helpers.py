"""Seeded scenario factories and parser fuzzing shared by the property tests."""

from __future__ import annotations

import os
import time
from dataclasses import replace

import numpy as np
from hypothesis import given, settings, strategies as st

from groupblame.blame import OptionTemplate, Scenario, SetAction, ShiftMarginal
from groupblame.causal import CausalModel, Signature, StructuralEquation, Variable
from groupblame.dsl import parse_with_diagnostics
from groupblame.epistemics import FactoredState
from groupblame.expressions import Binary, Count, If, Name, Num, event

YES_NO = ("yes", "no")


def _round(x: float) -> float:
    return float(round(x, 3))


def _committee_like(rng, m: int):
    agents = [f"a{i}" for i in range(1, m + 1)]
    k = int(rng.integers(1, 4))
    exo = tuple(Variable(f"U{j}", "exogenous", YES_NO) for j in range(1, k + 1))
    marginals = {}
    for var in exo:
        p = _round(rng.uniform(0.05, 0.95))
        marginals[var.name] = {"yes": p, "no": 1.0 - p}
    equations, endo = [], []
    for i in range(1, m + 1):
        endo.append(Variable(f"A{i}", "endogenous", YES_NO))
        if rng.random() < 0.3:
            body = Name(str(rng.choice(YES_NO)))
        else:
            body = Name(f"U{int(rng.integers(1, k + 1))}")
        equations.append(StructuralEquation(f"A{i}", body))
    threshold = int(rng.integers(1, m + 1))
    endo.append(Variable("Out", "endogenous", YES_NO))
    votes = Count(tuple(event(f"A{i}", "yes") for i in range(1, m + 1)))
    equations.append(StructuralEquation(
        "Out", If(Binary(">=", votes, Num(threshold)), Name("yes"), Name("no"))))
    sig = Signature(exo, tuple(endo), {f"A{i}": f"a{i}" for i in range(1, m + 1)})
    return agents, FactoredState(CausalModel(sig, tuple(equations)), marginals)


def random_scenario(seed: int, max_agents: int = 6) -> Scenario:
    """A random committee-shaped scenario with a random coordination menu.

    The menu mixes marginal shifts (in either direction), action switches,
    sized and unsized options, required agents and occasional infinite costs,
    so the resulting game need not be monotone.
    """
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, max_agents + 1))
    agents, state = _committee_like(rng, m)
    exo_names = list(state.marginals)
    menu = []
    for t in range(int(rng.integers(0, 4))):
        sized = rng.random() < 0.6
        size = None
        if sized:
            lo = int(rng.integers(0, m + 1))
            size = (lo, int(rng.integers(lo, m + 1)))
        unit = int(rng.integers(10, 400))
        cost = Binary("*", Name("n"), Num(unit)) if sized else Num(unit)
        if rng.random() < 0.1:
            cost = Num(float("inf"))
        required = frozenset(str(a) for a in rng.choice(agents, size=int(rng.integers(0, min(2, m) + 1)),
                                                        replace=False))
        effects = []
        for name in rng.choice(exo_names, size=int(rng.integers(1, len(exo_names) + 1)), replace=False):
            step = _round(rng.uniform(-0.3, 0.3))
            delta = Binary("*", Name("n"), Num(step)) if sized else Num(step)
            effects.append(ShiftMarginal(str(name), "yes", delta))
        if rng.random() < 0.4:
            who = int(rng.integers(1, m + 1))
            effects.append(SetAction(f"A{who}", str(rng.choice(YES_NO))))
            required = required | {f"a{who}"}
        menu.append(OptionTemplate(f"opt{t}", cost, tuple(effects), size, required))
    roll, k = rng.random(), int(rng.integers(1, 200))
    if roll < 0.6:
        baseline = Num(0)
    elif roll < 0.8:
        baseline = Binary("*", Name("size"), Num(k))
    else:
        # cheaper status quo for bigger groups; this is what breaks monotonicity
        baseline = Binary("-", Num(k * m), Binary("*", Name("size"), Num(k)))
    outcome = event("Out", str(rng.choice(YES_NO)))
    focal = "society" if rng.random() < 0.5 else str(rng.choice(agents))
    scenario = Scenario(f"random_{seed}", tuple(agents), state, outcome, tuple(menu), 1.0,
                        baseline, {}, focal, bool(rng.random() < 0.7))
    worst = scenario.max_finite_cost()
    balance = float(int(worst * rng.uniform(1.05, 3.0)) + 1)
    return replace(scenario, balance=balance)


def random_formula(rng, atoms: list, depth: int = 2):
    if depth == 0 or rng.random() < 0.3:
        var, value = atoms[int(rng.integers(len(atoms)))]
        return event(var, value)
    op = str(rng.choice(["and", "or"]))
    return Binary(op, random_formula(rng, atoms, depth - 1), random_formula(rng, atoms, depth - 1))


def random_single_agent(seed: int):
    """A one-agent scenario whose menu is exactly the agent's own actions.

    Returns ``(scenario, costs, actual_action)``.
    """
    rng = np.random.default_rng(seed)
    r = int(rng.integers(2, 5))
    actions = tuple(f"v{i}" for i in range(r))
    actual = actions[int(rng.integers(r))]
    exo = []
    marginals = {}
    for j in range(int(rng.integers(1, 4))):
        values = tuple(f"w{i}" for i in range(int(rng.integers(2, 4))))
        weights = rng.dirichlet(np.ones(len(values)))
        probs = [_round(w) for w in weights[:-1]]
        probs.append(1.0 - sum(probs))
        if probs[-1] < 0:
            probs = [1.0 / len(values)] * len(values)
        exo.append(Variable(f"U{j}", "exogenous", values))
        marginals[f"U{j}"] = dict(zip(values, probs))
    atoms = [("A", a) for a in actions] + [(v.name, x) for v in exo for x in v.range]
    formula = random_formula(rng, atoms, 3)
    endo = (Variable("A", "endogenous", actions), Variable("Out", "endogenous", YES_NO))
    equations = (StructuralEquation("A", Name(actual)),
                 StructuralEquation("Out", If(formula, Name("yes"), Name("no"))))
    model = CausalModel(Signature(tuple(exo), endo, {"A": "a1"}), equations)
    costs = {a: float(rng.integers(0, 900)) for a in actions}
    balance = float(1000 + int(rng.integers(0, 4000)))
    menu = tuple(OptionTemplate(f"do_{a}", Num(costs[a]), (SetAction("A", a),), None,
                                frozenset({"a1"}))
                 for a in actions if a != actual)
    scenario = Scenario(f"single_{seed}", ("a1",), FactoredState(model, marginals),
                        event("Out", "yes"), menu, balance, Num(costs[actual]), {}, "a1")
    return scenario, costs, actual


# -- parser fuzzing -----------------------------------------------------------

FUZZ_SECONDS = float(os.environ.get("GROUPBLAME_FUZZ_SECONDS", "2"))
FUZZ_ALPHABET = list("scenario focal agents param option exogenous endogenous outcome"
                     " {}()[]=;:,.~+-*/<>!#\n0123456789abxyzUAN")


def check_total(result) -> None:
    """The parser answered with a scenario or with at least one located error."""
    scenario, diags = result
    assert scenario is not None or any(d.severity == "error" for d in diags)
    for d in diags:
        assert d.code[0] in "EW" and d.span.line >= 1 and d.span.column >= 1


@settings(max_examples=200, deadline=None, database=None)
@given(st.binary(max_size=400))
def _fuzz_bytes(data):
    check_total(parse_with_diagnostics(data))


@settings(max_examples=200, deadline=None, database=None)
@given(st.text(alphabet=st.sampled_from(FUZZ_ALPHABET), max_size=400))
def _fuzz_tokens(text):
    check_total(parse_with_diagnostics(text))


def fuzz_parser(seconds: float) -> tuple[int, float]:
    """Run batches of random inputs until ``seconds`` elapse; returns (batches, elapsed)."""
    start = time.monotonic()
    runs = 0
    while runs == 0 or time.monotonic() - start < seconds:
        _fuzz_bytes()
        _fuzz_tokens()
        runs += 1
    return runs, time.monotonic() - start
