import json
import math
from dataclasses import replace
from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given, strategies as st

from groupblame.attribution import (
    attribute,
    check_axioms,
    check_strong_monotonicity,
    coalition_values,
    dummy_agents,
    game_from_values,
    invert,
    marginal_contribution,
    permute_scenario,
    probe_permutations,
    shapley_exact,
    shapley_sampled,
    shapley_weights,
    symmetry_deviation,
)
from groupblame.blame import gb, validate_monotonicity
from groupblame.errors import InvalidSampleCount, NotABijection, TooManyAgents
from groupblame.registry import builtin
from helpers import random_scenario
from oracles import FROZEN, shapley_all_orderings

ORACLE = json.loads(FROZEN.read_text())
DOCUMENTED = ORACLE["shapley_focal"]["switch_only=True,focal_counts=True"]


@pytest.fixture(scope="module")
def a1():
    return builtin("committee_a1")


@pytest.fixture(scope="module")
def a1_game(a1):
    return coalition_values(a1)


def test_game_endpoints(a1_game):
    assert a1_game.value(0) == 0.0
    assert a1_game.grand_value == pytest.approx(0.390, abs=1e-3)


def test_chain_is_nondecreasing(a1_game):
    chain = [a1_game.value((1 << k) - 1) for k in range(8)]
    assert chain == sorted(chain)


def test_single_agent_game():
    demo = builtin("single_agent_demo")
    game = coalition_values(demo)
    assert game.values.tolist() == [0.0, gb(demo, ["a1"]).value]
    assert shapley_exact(game)["a1"] == game.value(1)


def test_marginal_contribution_cases(a1, a1_game):
    bit = 1 << a1.agent_index["a1"]
    assert marginal_contribution(a1_game, "a1", bit) == a1_game.value(bit)
    for s in (0, 0b0110, 0b1111110):
        assert marginal_contribution(a1_game, "a1", s) == marginal_contribution(a1_game, "a1", s | bit)
    full = a1.full_mask
    assert marginal_contribution(a1_game, "a1", full) == a1_game.value(full) - a1_game.value(full & ~bit)


@pytest.mark.parametrize("name, agent, value", [
    ("committee_a1", "a1", 0.073), ("committee_a2", "a2", 0.120), ("committee_a3", "a3", 0.079),
    ("committee_a4", "a4", 0.068), ("committee_a5", "a5", 0.125), ("committee_a6", "a6", 0.022),
])
def test_committee_shapley(name, agent, value):
    result = shapley_exact(coalition_values(builtin(name)))
    assert result[agent] == pytest.approx(value, abs=5e-3)
    assert result[agent] == pytest.approx(DOCUMENTED[agent], abs=1e-12)
    assert result.efficiency_residual <= 1e-9


@pytest.mark.parametrize("m", [1, 2, 5, 12, 16, 20])
def test_weights_normalise(m):
    w = shapley_weights(m)
    assert math.fsum(comb(m - 1, k - 1) * w[k] for k in range(1, m + 1)) == pytest.approx(1.0, abs=1e-12)


def test_log_space_weights_match_factorials():
    w = shapley_weights(18)
    for k in range(1, 19):
        exact = math.factorial(k - 1) * math.factorial(18 - k) / math.factorial(18)
        assert w[k] == pytest.approx(exact, rel=1e-12)


def test_exact_matches_all_orderings_on_rational_games():
    rng = np.random.default_rng(11)
    for m in range(1, 6):
        for _ in range(5):
            raw = [Fraction(int(x), 1000) for x in rng.integers(0, 1000, 1 << m)]
            raw[0] = Fraction(0)
            players = list(range(m))
            oracle = shapley_all_orderings(players, lambda s: raw[sum(1 << p for p in s)])
            game = game_from_values([f"p{i}" for i in players], [float(x) for x in raw])
            result = shapley_exact(game)
            for p in players:
                assert abs(result.values[p] - float(oracle[p])) <= 1e-12


def test_square_game_oracle():
    players = ["x", "y", "z"]
    game = game_from_values(players, [bin(mask).count("1") ** 2 for mask in range(8)])
    assert shapley_exact(game).as_dict() == pytest.approx(ORACLE["square_game"])


def test_sampled_close_to_exact(a1, a1_game):
    exact = shapley_exact(a1_game)
    sampled = shapley_sampled(a1, 20_000, seed=99)
    assert np.all(np.abs(sampled.values - exact.values) <= 3 * sampled.stderr)
    assert np.all(sampled.stderr > 0)
    assert sampled.method == "sampled" and sampled.n_permutations == 20_000


def test_sampled_is_deterministic(a1):
    first = shapley_sampled(a1, 500, seed=3)
    second = shapley_sampled(a1, 500, seed=3)
    assert np.array_equal(first.values, second.values)
    assert np.array_equal(first.stderr, second.stderr)


def test_sampled_single_agent_is_exact():
    demo = builtin("single_agent_demo")
    for seed in (0, 1, 2):
        result = shapley_sampled(demo, 7, seed)
        assert result["a1"] == gb(demo, ["a1"]).value


def test_sampled_rejects_zero():
    with pytest.raises(InvalidSampleCount):
        shapley_sampled(builtin("single_agent_demo"), 0, seed=1)


def test_stderr_shrinks_like_inverse_root(a1):
    ratios = []
    for seed in range(8):
        small = shapley_sampled(a1, 2000, seed)
        large = shapley_sampled(a1, 4000, seed + 1000)
        ratios.append(float(np.mean(large.stderr / small.stderr)))
    assert 0.6 <= float(np.mean(ratios)) <= 0.85


def test_lazy_sampling_beyond_materialisation_limit():
    demo = builtin("single_agent_demo")
    crowd = replace(demo, agents=tuple(f"a{i}" for i in range(1, 26)))
    with pytest.raises(TooManyAgents):
        coalition_values(crowd)
    result = shapley_sampled(crowd, 200, seed=0)
    assert result["a1"] == pytest.approx(0.216)
    assert sum(abs(result[a]) for a in crowd.agents if a != "a1") == 0.0


# -- permutations -------------------------------------------------------------


def test_identity_and_inverse(a1):
    identity = {a: a for a in a1.agents}
    assert permute_scenario(a1, identity) == a1
    pi = probe_permutations(a1.agents, 3, seed=5)[2]
    assert permute_scenario(permute_scenario(a1, pi), invert(pi)) == a1


def test_swap_moves_blame(a1, a1_game):
    pi = {a: a for a in a1.agents}
    pi["a1"], pi["a3"] = "a3", "a1"
    swapped = shapley_exact(coalition_values(permute_scenario(a1, pi)))
    base = shapley_exact(a1_game)
    assert abs(swapped["a3"] - base["a1"]) <= 1e-9
    assert abs(swapped["a1"] - base["a3"]) <= 1e-9


def test_not_a_bijection(a1):
    with pytest.raises(NotABijection):
        permute_scenario(a1, {a: "a1" for a in a1.agents})


def test_symmetry_over_twenty_permutations(a1, a1_game):
    base = shapley_exact(a1_game)
    worst = max(symmetry_deviation(a1, pi, base) for pi in probe_permutations(a1.agents, 20, seed=1))
    assert worst <= 1e-9


# -- axioms -------------------------------------------------------------------


def test_axiom_report_committee(a1):
    report = check_axioms(a1)
    assert report.efficiency_residual <= 1e-9
    assert report.symmetry_deviation <= 1e-9
    assert report.monotone and report.passed()


def test_padded_agent_is_a_dummy():
    demo = builtin("single_agent_demo")
    padded = replace(demo, agents=("a1", "pad"))
    report = check_axioms(padded)
    assert report.dummy_agents == ["pad"]
    assert report.attribution["pad"] == 0.0
    assert report.attribution["a1"] == pytest.approx(0.216)


def test_strong_monotonicity_cheaper_switch():
    # a cheaper switch only touches coalitions containing a3, so the premise holds by construction
    costly = builtin("committee_a3")
    cheap = replace(costly, params={**costly.params, "switch_cost": 500})
    check = check_strong_monotonicity(cheap, costly, "a3")
    assert check.premise and check.conclusion and check.holds
    assert check.db_first >= check.db_second


def test_strong_monotonicity_effectiveness_pair():
    weak = builtin("committee_a3")
    strong = replace(weak, params={**weak.params, "per_head": 0.05})
    check = check_strong_monotonicity(strong, weak, "a3")
    assert check.holds
    if not check.premise:
        pytest.skip(f"premise fails (worst marginal gap {check.worst_gap:.4f}); implication is vacuous")
    assert check.conclusion


def test_strong_monotonicity_committee_pair():
    check = check_strong_monotonicity(builtin("committee_a1"), builtin("committee_a3"), "a3")
    # the statement is an implication; when the premise fails there is nothing to check
    assert check.holds
    if check.premise:
        assert check.db_first >= check.db_second - 1e-12


def test_dummy_detection_on_constructed_game():
    game = game_from_values(["x", "y"], [0.0, 0.5, 0.0, 0.5])
    assert dummy_agents(game) == ["y"]


# -- random scenarios ---------------------------------------------------------

seeds = st.integers(0, 10_000)


@given(seeds)
def test_efficiency_random(seed):
    result = attribute(random_scenario(seed))
    assert result.efficiency_residual <= 1e-9


@given(seeds)
def test_non_negative_when_monotone(seed):
    scenario = random_scenario(seed)
    if not validate_monotonicity(scenario).ok:
        return
    assert attribute(scenario).values.min() >= -1e-12


@given(seeds)
def test_repair_restores_monotonicity(seed):
    scenario = random_scenario(seed)
    game = coalition_values(scenario, repair=True)
    m = scenario.n_agents
    for t in range(1 << m):
        for i in range(m):
            if t >> i & 1:
                assert game.values[t ^ (1 << i)] <= game.values[t]
    assert attribute(scenario, repair=True).values.min() >= -1e-12


@given(st.integers(0, 3000))
def test_exact_matches_all_orderings_on_scenarios(seed):
    scenario = random_scenario(seed, max_agents=5)
    game = coalition_values(scenario)
    oracle = shapley_all_orderings(list(range(scenario.n_agents)),
                                   lambda s: game.values[sum(1 << p for p in s)])
    result = shapley_exact(game)
    for p, v in oracle.items():
        assert abs(result.values[p] - v) <= 1e-12
