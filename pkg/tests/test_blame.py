import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from groupblame.blame import (
    OptionTemplate,
    Scenario,
    SetAction,
    SetMarginal,
    ShiftMarginal,
    apply_effects,
    db_single,
    db_single_max,
    delta_group,
    delta_single,
    gb,
    gb_relative,
    gb_table,
    instantiate_menu,
    subset_max,
    validate_monotonicity,
    validate_scenario,
)
from groupblame.causal import CausalModel, CausalSetting, Signature, StructuralEquation, Variable
from groupblame.epistemics import ExplicitState, FactoredState, prob
from groupblame.errors import BalanceTooSmall
from groupblame.expressions import Binary, If, Name, Num, event
from groupblame.registry import builtin
from helpers import random_scenario, random_single_agent
from oracles import FROZEN, committee_gb

ORACLE = json.loads(FROZEN.read_text())
FAIL = event("Pass", "no")


@pytest.fixture(scope="module")
def a1():
    return builtin("committee_a1")


def action_state():
    """P(Out | A=a) = 0.7 and P(Out | A=b) = 0.4 over three weighted contexts."""
    sig = Signature((Variable("U", "exogenous", ("u0", "u1", "u2")),),
                    (Variable("A", "endogenous", ("a", "b")), Variable("Out", "endogenous", ("yes", "no"))),
                    {"A": "x"})
    cond = Binary("or",
                  Binary("and", event("A", "a"), Binary("!=", Name("U"), Name("u2"))),
                  Binary("and", event("A", "b"), event("U", "u0")))
    model = CausalModel(sig, (StructuralEquation("A", Name("a")),
                              StructuralEquation("Out", If(cond, Name("yes"), Name("no")))))
    return ExplicitState(tuple((CausalSetting(model, {"U": u}), w)
                               for u, w in (("u0", 0.4), ("u1", 0.3), ("u2", 0.3))))


OUT = event("Out", "yes")


def test_delta_single_examples():
    state = action_state()
    assert delta_single(state, "A", "a", "b", OUT) == pytest.approx(0.3)
    assert delta_single(state, "A", "a", "a", OUT) == 0.0
    assert delta_single(state, "A", "b", "a", OUT) == 0.0


def test_db_single_cost_factor():
    state = action_state()
    assert db_single(state, {"a": 0, "b": 700}, 5000, "A", "a", "b", OUT) == pytest.approx(0.258)
    assert db_single(state, {"a": 700, "b": 0}, 5000, "A", "a", "b", OUT) == pytest.approx(0.3)
    value, alt = db_single_max(state, {"a": 0, "b": 700}, 5000, "A", "a", OUT)
    assert (value, alt) == (pytest.approx(0.258), "b")
    with pytest.raises(BalanceTooSmall):
        db_single(state, {"a": 0, "b": 700}, 700, "A", "a", "b", OUT)


def test_db_single_max_ties_go_to_range_order():
    state = action_state()
    # both alternatives give 0 when a' = a is cheapest; the first in range order wins
    value, alt = db_single_max(state, {"a": 0, "b": 0}, 10, "A", "b", OUT)
    assert (value, alt) == (0.0, "a")


def lone_committee_member():
    """The committee with only a1 as an agent; a1's only option is to switch."""
    base = builtin("committee_a1").base_state
    sig = base.model.signature
    model = CausalModel(Signature(sig.exogenous, sig.endogenous, {"A1": "a1"}), base.model.equations)
    state = FactoredState(model, base.marginals)
    switch = OptionTemplate("switch", Num(2000), (SetAction("A1", "yes"),), None, frozenset({"a1"}))
    return Scenario("lone", ("a1",), state, FAIL, (switch,), 5000, focal="a1")


def test_single_agent_committee_reduction():
    scenario = lone_committee_member()
    expected, alt = db_single_max(scenario.base_state, {"no": 0, "yes": 2000}, 5000, "A1", "no", FAIL)
    assert alt == "yes"
    assert expected == pytest.approx((0.45568 - 0.1792) * 3000 / 5000, abs=1e-12)
    assert gb(scenario, ["a1"]).value == pytest.approx(expected, abs=1e-12)


def test_delta_group_examples(a1):
    pressure7 = instantiate_menu(a1, a1.agents)[7]
    assert pressure7.id == "pressure(7)"
    expected = ORACLE["p_fail_base"] - ORACLE["p_fail_pressure7"]
    assert delta_group(a1.base_state, pressure7.state, FAIL) == pytest.approx(expected, abs=1e-12)
    assert delta_group(a1.base_state, pressure7.state, FAIL) == pytest.approx(0.45345, abs=1e-5)
    assert delta_group(a1.base_state, a1.base_state, FAIL) == 0.0
    a5 = builtin("committee_a5")
    state = [c for c in instantiate_menu(a5, a5.agents) if c.id == "pressure(7)"][0].state
    assert delta_group(a5.base_state, state, FAIL) == pytest.approx(0.65137, abs=1e-5)


def test_menu_for_empty_and_single_coalitions(a1):
    assert [c.id for c in instantiate_menu(a1, [])] == ["baseline"]
    menu = instantiate_menu(a1, ["a1"])
    assert [(c.id, c.cost) for c in menu] == [
        ("baseline", 0), ("pressure(1)", 100), ("pressured_switch(0)", 2000),
        ("pressured_switch(1)", 2100)]


def test_menu_for_full_committee(a1):
    menu = instantiate_menu(a1, a1.agents)
    assert len(menu) == 16
    assert [c.id for c in menu[:2]] == ["baseline", "pressure(1)"]
    assert menu[-1].id == "pressured_switch(7)"


def test_without_focal_agent_no_switch(a1):
    ids = [c.id for c in instantiate_menu(a1, ["a2", "a3"])]
    assert ids == ["baseline", "pressure(1)", "pressure(2)"]


@pytest.mark.parametrize("name, value, argmax", [
    ("committee_a1", 0.390, "pressure(7)"),
    ("committee_a3", 0.317, None),
    ("committee_a4", 0.361, "pressure(6)"),
    ("committee_a5", 0.560, None),
    ("committee_a6", 0.157, "pressure(6)"),
])
def test_group_values(name, value, argmax):
    scenario = builtin(name)
    res = gb(scenario, scenario.agents)
    assert res.value == pytest.approx(value, abs=1e-3)
    assert res.value == pytest.approx(ORACLE["gb_all"][name[-2:]], abs=1e-12)
    if argmax:
        assert res.argmax == argmax


def test_empty_group_is_blameless(a1):
    assert gb(a1, []).value == 0.0
    assert gb(a1, 0).argmax == "baseline"


def test_subcoalitions_match_oracle(a1):
    # by symmetry only the size and a1's membership matter
    for size in range(8):
        for with_focal in (True, False):
            if (size == 0 and with_focal) or (size == 7 and not with_focal):
                continue
            members = (["a1"] if with_focal else []) + [f"a{i}" for i in range(2, 9)][:size - with_focal]
            assert gb(a1, members).value == pytest.approx(committee_gb("a1", size, with_focal), abs=1e-12)


def test_gb_relative_baseline_is_zero(a1):
    base = instantiate_menu(a1, a1.agents)[0]
    assert gb_relative(a1, a1.agents, base) == 0.0


def test_balance_must_exceed_costs(a1):
    small = replace(a1, balance=2700.0)
    with pytest.raises(BalanceTooSmall):
        gb(small, small.agents)
    assert [f.category for f in validate_scenario(small)] == ["balance_too_small"]


def test_shift_clamps_and_rescales():
    scenario = builtin("committee_a1")
    eff = (ShiftMarginal("U2", "yes", Num(0.9)), ShiftMarginal("U3", "no", Num(-2)))
    state = apply_effects(scenario.base_state, eff, {})
    assert state.marginals["U2"] == {"yes": 1.0, "no": 0.0}
    assert state.marginals["U3"] == {"yes": 1.0, "no": 0.0}


def test_shift_rescales_three_values():
    sig = Signature((Variable("U", "exogenous", ("a", "b", "c")),), (Variable("X", "endogenous", ("a", "b", "c")),))
    model = CausalModel(sig, (StructuralEquation("X", Name("U")),))
    state = FactoredState(model, {"U": {"a": 0.2, "b": 0.2, "c": 0.6}})
    out = apply_effects(state, (ShiftMarginal("U", "a", Num(0.4)),), {}).marginals["U"]
    assert out["a"] == pytest.approx(0.6)
    assert out["b"] == pytest.approx(0.1) and out["c"] == pytest.approx(0.3)
    out = apply_effects(state, (SetMarginal("U", {"a": Num(1), "b": Num(0), "c": Num(0)}),), {})
    assert out.marginals["U"]["a"] == 1.0


def test_monotonicity_reports(a1):
    report = validate_monotonicity(a1)
    assert report.ok and report.method == "exhaustive" and report.checked == 3**7
    assert validate_monotonicity(builtin("single_agent_demo")).ok


def test_decreasing_status_quo_cost_breaks_monotonicity(a1):
    cheap_for_crowds = Binary("-", Num(4200), Binary("*", Name("size"), Num(600)))
    scenario = replace(a1, baseline_cost=cheap_for_crowds)
    report = validate_monotonicity(scenario)
    assert not report.ok
    values, _ = gb_table(scenario)
    for s, t, vs, vt in report.violations:
        assert s & t == s and vs > vt
        assert values[s] == vs and values[t] == vt
    repaired = subset_max(values, 7)
    assert np.all(repaired >= values)
    for t in range(128):
        assert repaired[t] == max(values[s] for s in range(128) if s & t == s)


def test_sampled_monotonicity_path(a1, monkeypatch):
    from groupblame import blame

    monkeypatch.setattr(blame, "EXHAUSTIVE_MONOTONICITY_LIMIT", 3)
    report = validate_monotonicity(a1, samples=300, seed=4)
    assert report.method == "sampled" and report.ok and report.checked == 300


def test_table_matches_pointwise(a1):
    values, argmax = gb_table(a1)
    threaded, threaded_argmax = gb_table(a1, threads=4)
    assert np.array_equal(values, threaded) and argmax == threaded_argmax
    for mask in range(128):
        res = gb(a1, mask)
        assert values[mask] == res.value and argmax[mask] == res.argmax


# -- properties ---------------------------------------------------------------

seeds = st.integers(0, 10_000)


@given(seeds)
def test_gb_bounds_and_floor(seed):
    scenario = random_scenario(seed)
    values, _ = gb_table(scenario)
    assert values[0] == 0.0
    assert np.all(values >= 0.0) and np.all(values <= 1.0)


@given(seeds, st.data())
def test_menu_monotone_in_coalition(seed, data):
    scenario = random_scenario(seed)
    full = scenario.full_mask
    t = data.draw(st.integers(0, full))
    s = t & data.draw(st.integers(0, full))
    small = {(c.id, c.cost) for c in instantiate_menu(scenario, s)[1:]}
    large = {(c.id, c.cost) for c in instantiate_menu(scenario, t)[1:]}
    assert small <= large


@given(seeds)
def test_costlier_duplicate_never_raises_gb(seed):
    scenario = random_scenario(seed)
    if not scenario.menu:
        return
    t = scenario.menu[0]
    dearer = replace(t, name="dearer", cost=Binary("+", t.cost, Num(1)))
    bigger = replace(scenario, menu=scenario.menu + (dearer,), balance=scenario.balance + 1)
    for mask in range(scenario.full_mask + 1):
        before = gb(replace(scenario, balance=scenario.balance + 1), mask)
        after = gb(bigger, mask)
        assert after.value == before.value
        assert after.argmax == before.argmax


@given(st.integers(0, 10_000))
def test_hk_reduction(seed):
    scenario, costs, actual = random_single_agent(seed)
    expected, _ = db_single_max(scenario.base_state, costs, scenario.balance, "A", actual, scenario.outcome)
    assert abs(gb(scenario, ["a1"]).value - expected) <= 1e-12


def test_validate_scenario_catches_bad_templates(a1):
    bad = OptionTemplate("bad", Binary("*", Name("k"), Num(2)),
                         (ShiftMarginal("Pass", "yes", Num(0.1)), SetAction("U2", "yes")),
                         (3, 1), frozenset({"zz"}))
    cats = {f.category for f in validate_scenario(replace(a1, menu=a1.menu + (bad,)))}
    assert {"unbound_name", "bad_size_range", "unknown_agent", "not_exogenous",
            "not_an_action"} <= cats


def test_probability_cache_matches_direct_query(a1):
    for cand in instantiate_menu(a1, a1.agents):
        assert cand.probability == prob(cand.state, None, FAIL).value
