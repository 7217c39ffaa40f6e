import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from groupblame.blame import apply_effects
from groupblame.causal import CausalModel, CausalSetting, Signature, StructuralEquation, Variable
from groupblame.epistemics import (
    ExplicitState,
    FactoredState,
    expand,
    prob,
    sample_prob,
)
from groupblame.errors import EnumerationBoundExceeded, InvalidSampleCount, InvalidState
from groupblame.expressions import Binary, Bool, Name, Unary, event
from groupblame.registry import builtin
from helpers import random_scenario
from oracles import FROZEN, brute_probability, p_fail

ORACLE = json.loads(FROZEN.read_text())
FAIL = event("Pass", "no")
PASS = event("Pass", "yes")


@pytest.fixture(scope="module")
def a1():
    return builtin("committee_a1")


def pressured(scenario, n):
    template = scenario.menu[0]
    return apply_effects(scenario.base_state, template.effects, scenario.bindings(n))


def test_frozen_oracles_still_reproduce():
    assert ORACLE["p_fail_base"] == p_fail(0.6, False)
    assert ORACLE["p_fail_pressure7"] == p_fail(0.95, False)


def test_base_failure_probability(a1):
    assert prob(a1.base_state, None, FAIL).value == pytest.approx(ORACLE["p_fail_base"], abs=1e-12)
    assert prob(a1.base_state, None, FAIL).value == pytest.approx(0.45568, abs=1e-9)


def test_pressure_seven_moves_everyone_to_095(a1):
    state = pressured(a1, 7)
    assert all(m["yes"] == pytest.approx(0.95) for m in state.marginals.values())
    p_pass = prob(state, None, PASS).value
    assert p_pass == pytest.approx(0.99777, abs=5e-6)
    assert p_pass - prob(a1.base_state, None, PASS).value == pytest.approx(0.45345, abs=5e-6)
    assert prob(state, None, FAIL).value == pytest.approx(ORACLE["p_fail_pressure7"], abs=1e-12)


def test_committee_a5_pass_probabilities():
    a5 = builtin("committee_a5")
    assert prob(a5.base_state, None, PASS).value == pytest.approx(0.1792, abs=1e-12)
    assert prob(pressured(a5, 7), None, PASS).value == pytest.approx(0.83057, abs=5e-6)


def test_agrees_with_brute_force_interpreter(a1):
    model = a1.base_state.model
    exo = {v: dict(m) for v, m in a1.base_state.marginals.items()}
    eqs = dict(model.equation_for)
    for iv in ({}, {"A1": "yes"}, {"A1": "yes", "A3": "no"}):
        expected = brute_probability(exo, eqs, iv, FAIL)
        assert prob(a1.base_state, iv, FAIL).value == pytest.approx(expected, abs=1e-12)


def test_expand_committee(a1):
    explicit = expand(a1.base_state)
    assert len(explicit.settings) == 64
    assert math.fsum(w for _, w in explicit.settings) == pytest.approx(1.0, abs=1e-12)
    assert prob(explicit, None, FAIL).value == pytest.approx(prob(a1.base_state, None, FAIL).value, abs=1e-12)


def test_expand_without_exogenous_variables():
    sig = Signature((), (Variable("X", "endogenous", ("a",)),))
    model = CausalModel(sig, (StructuralEquation("X", Name("a")),))
    explicit = expand(FactoredState(model, {}))
    assert len(explicit.settings) == 1
    assert explicit.settings[0][1] == 1.0


def test_expand_point_mass(a1):
    marginals = dict(a1.base_state.marginals)
    marginals["U2"] = {"yes": 1.0, "no": 0.0}
    explicit = expand(FactoredState(a1.base_state.model, marginals))
    assert len(explicit.settings) == 32
    assert all(s.context["U2"] == "yes" for s, _ in explicit.settings)


def test_enumeration_bound(a1):
    with pytest.raises(EnumerationBoundExceeded, match="sample_prob"):
        prob(a1.base_state, None, FAIL, bound=32)
    with pytest.raises(EnumerationBoundExceeded):
        expand(a1.base_state, bound=10)


def test_sampling_matches_exact(a1):
    est = sample_prob(a1.base_state, None, FAIL, 100_000, seed=2024)
    assert abs(est.value - 0.45568) <= 3 * est.stderr
    assert est.stderr == pytest.approx(math.sqrt(est.value * (1 - est.value) / 100_000))
    again = sample_prob(a1.base_state, None, FAIL, 100_000, seed=2024)
    assert again == est


def test_sampling_point_mass_single_draw(a1):
    marginals = {k: {"yes": 1.0, "no": 0.0} for k in a1.base_state.marginals}
    state = FactoredState(a1.base_state.model, marginals)
    est = sample_prob(state, None, PASS, 1, seed=5)
    assert est.value == 1.0 and est.stderr == 0.0


def test_sampling_needs_positive_count(a1):
    with pytest.raises(InvalidSampleCount):
        sample_prob(a1.base_state, None, FAIL, 0, seed=1)


def test_sampling_consistency_over_seed_suite(a1):
    exact = prob(a1.base_state, None, FAIL).value
    hits = 0
    for seed in range(100):
        est = sample_prob(a1.base_state, None, FAIL, 4000, seed=seed)
        hits += abs(est.value - exact) <= 3 * est.stderr
    assert hits >= 99


def two_setting_state(p_first):
    sig = Signature((Variable("U", "exogenous", ("u0", "u1")),),
                    (Variable("X", "endogenous", ("x0", "x1")),))
    model = CausalModel(sig, (StructuralEquation("X", Name("x0")),))
    other = CausalModel(sig, (StructuralEquation("X", Name("x1")),))
    return ExplicitState(((CausalSetting(model, {"U": "u0"}), p_first),
                          (CausalSetting(other, {"U": "u1"}), 1 - p_first)))


def test_explicit_states_allow_different_equations():
    state = two_setting_state(0.3)
    assert prob(state, None, event("X", "x0")).value == pytest.approx(0.3)


def test_explicit_validation():
    with pytest.raises(InvalidState):
        two_setting_state(1.2)
    sig = Signature((Variable("U", "exogenous", ("u0",)),), (Variable("X", "endogenous", ("x0",)),))
    model = CausalModel(sig, (StructuralEquation("X", Name("x0")),))
    with pytest.raises(InvalidState):
        ExplicitState(((CausalSetting(model, {"U": "u0"}), 0.5),))
    with pytest.raises(InvalidState):
        ExplicitState(())


def test_zero_weights_dropped():
    state = two_setting_state(1.0)
    assert len(state.settings) == 1


def test_factored_validation(a1):
    marginals = dict(a1.base_state.marginals)
    marginals["U2"] = {"yes": 0.7, "no": 0.7}
    with pytest.raises(InvalidState):
        FactoredState(a1.base_state.model, marginals)
    marginals["U2"] = {"maybe": 1.0}
    with pytest.raises(InvalidState):
        FactoredState(a1.base_state.model, marginals)


# -- properties over random states ------------------------------------------

seeds = st.integers(0, 5000)


@given(seeds)
def test_normalisation_and_complement(seed):
    scenario = random_scenario(seed)
    state, phi = scenario.base_state, scenario.outcome
    assert prob(state, None, Bool(True)).value == 1.0
    assert prob(state, None, Bool(False)).value == 0.0
    total = prob(state, None, phi).value + prob(state, None, Unary("not", phi)).value
    assert total == pytest.approx(1.0, abs=1e-12)


@given(seeds)
def test_factored_and_explicit_agree(seed):
    scenario = random_scenario(seed)
    state, phi = scenario.base_state, scenario.outcome
    iv = {"A1": "yes"}
    assert abs(prob(state, iv, phi).value - prob(expand(state), iv, phi).value) <= 1e-12


@given(seeds)
def test_event_monotonicity(seed):
    scenario = random_scenario(seed)
    state, phi = scenario.base_state, scenario.outcome
    stronger = Binary("and", phi, event("A1", "yes"))
    weaker = Binary("or", phi, event("A1", "yes"))
    p = prob(state, None, phi).value
    assert prob(state, None, stronger).value <= p + 1e-12
    assert p <= prob(state, None, weaker).value + 1e-12


@given(seeds)
def test_matches_independent_interpreter(seed):
    scenario = random_scenario(seed)
    state = scenario.base_state
    eqs = dict(state.model.equation_for)
    expected = brute_probability({k: dict(v) for k, v in state.marginals.items()}, eqs, {},
                                 scenario.outcome)
    assert prob(state, None, scenario.outcome).value == pytest.approx(expected, abs=1e-12)
