"""Group blameworthiness over structural causal models, apportioned by Shapley value."""

from groupblame.attribution import (
    AttributionResult,
    CoalitionGame,
    attribute,
    check_axioms,
    coalition_values,
    shapley_exact,
    shapley_sampled,
)
from groupblame.blame import (
    OptionTemplate,
    Scenario,
    SetAction,
    SetMarginal,
    ShiftMarginal,
    db_single,
    db_single_max,
    delta_group,
    delta_single,
    gb,
    gb_table,
    validate_monotonicity,
)
from groupblame.causal import (
    CausalModel,
    CausalSetting,
    Signature,
    StructuralEquation,
    Variable,
    evaluate,
    holds,
    validate_model,
)
from groupblame.dsl import parse, parse_with_diagnostics, serialize
from groupblame.epistemics import ExplicitState, FactoredState, prob, sample_prob
from groupblame.registry import available, builtin

__all__ = [
    "AttributionResult", "CausalModel", "CausalSetting", "CoalitionGame", "ExplicitState",
    "FactoredState", "OptionTemplate", "Scenario", "SetAction", "SetMarginal", "ShiftMarginal",
    "Signature", "StructuralEquation", "Variable", "attribute", "available", "builtin",
    "check_axioms", "coalition_values", "db_single", "db_single_max", "delta_group",
    "delta_single", "evaluate", "gb", "gb_table", "holds", "parse", "parse_with_diagnostics",
    "prob", "sample_prob", "serialize", "shapley_exact", "shapley_sampled",
    "validate_model", "validate_monotonicity",
]
__version__ = "0.1.0"
