"""Structural causal models: signatures, equations, contexts, interventions.

Models are recursive (acyclic) with finite symbolic ranges.  The solver is
vectorised: :func:`solve_batch` evaluates a whole array of contexts in one
pass, and :func:`evaluate` is the single-setting convenience on top of it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from graphlib import CycleError, TopologicalSorter
from typing import Iterable, Mapping, Sequence

import numpy as np

from groupblame.errors import EquationRangeError, ModelInvalid, SignatureMismatch
from groupblame.expressions import (
    BOOL,
    SYM,
    Expr,
    ExprError,
    evaluate as eval_expr,
    infer_kind,
    names_in,
    symbol_code,
    symbol_name,
)

EXOGENOUS = "exogenous"
ENDOGENOUS = "endogenous"

# joint assignments above this are range-checked lazily at evaluation time
RANGE_CHECK_LIMIT = 2**20

Intervention = Mapping[str, str]
OutcomeFormula = Expr


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str
    range: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "range", tuple(self.range))


@dataclass(frozen=True)
class Signature:
    exogenous: tuple[Variable, ...]
    endogenous: tuple[Variable, ...]
    agent_of: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "exogenous", tuple(self.exogenous))
        object.__setattr__(self, "endogenous", tuple(self.endogenous))
        object.__setattr__(self, "agent_of", dict(self.agent_of))

    @property
    def actions(self) -> tuple[str, ...]:
        return tuple(self.agent_of)

    @cached_property
    def variables(self) -> dict[str, Variable]:
        return {v.name: v for v in (*self.exogenous, *self.endogenous)}

    def action_of(self, agent: str) -> str | None:
        for var, ag in self.agent_of.items():
            if ag == agent:
                return var
        return None


@dataclass(frozen=True)
class StructuralEquation:
    target: str
    body: Expr


@dataclass(frozen=True)
class CausalModel:
    signature: Signature
    equations: tuple[StructuralEquation, ...]

    def __post_init__(self):
        object.__setattr__(self, "equations", tuple(self.equations))

    @cached_property
    def equation_for(self) -> dict[str, Expr]:
        return {eq.target: eq.body for eq in self.equations}

    @cached_property
    def topological_order(self) -> tuple[str, ...]:
        """Endogenous variables in dependency order; raises ModelInvalid if unusable."""
        report = validate_model(self)
        if not report.ok:
            raise ModelInvalid(report.findings)
        return _toposort(self)

    def replace_equation(self, target: str, body: Expr) -> "CausalModel":
        eqs = tuple(StructuralEquation(e.target, body) if e.target == target else e
                    for e in self.equations)
        return CausalModel(self.signature, eqs)

    def relabel_agents(self, mapping: Mapping[str, str]) -> "CausalModel":
        sig = self.signature
        agent_of = {a: mapping.get(g, g) for a, g in sig.agent_of.items()}
        return CausalModel(Signature(sig.exogenous, sig.endogenous, agent_of), self.equations)


@dataclass(frozen=True)
class CausalSetting:
    model: CausalModel
    context: Mapping[str, str]

    def __post_init__(self):
        object.__setattr__(self, "context", dict(self.context))
        check_context(self.model, self.context)


# -- validation -------------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    category: str
    variables: tuple[str, ...]
    message: str

    def __str__(self) -> str:
        return f"{self.category}({', '.join(self.variables)}): {self.message}"


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def categories(self) -> list[str]:
        return [f.category for f in self.findings]

    def add(self, category: str, variables: Iterable[str], message: str) -> None:
        self.findings.append(Finding(category, tuple(variables), message))


def _dependencies(model: CausalModel) -> dict[str, set[str]]:
    endo = {v.name for v in model.signature.endogenous}
    return {eq.target: names_in(eq.body) & endo for eq in model.equations if eq.target in endo}


def _toposort(model: CausalModel) -> tuple[str, ...]:
    # declaration order breaks ties so the default order is reproducible
    order = [v.name for v in model.signature.endogenous]
    deps = _dependencies(model)
    ts = TopologicalSorter()
    for name in order:
        ts.add(name, *sorted(deps.get(name, ()), key=order.index))
    return tuple(ts.static_order())


def validate_model(model: CausalModel) -> ValidationReport:
    """Check every well-formedness invariant of ``model``; findings are data."""
    report = ValidationReport()
    sig = model.signature
    seen: dict[str, str] = {}
    for var in (*sig.exogenous, *sig.endogenous):
        if var.name in seen:
            cat = "overlapping_sets" if seen[var.name] != var.kind else "duplicate_name"
            report.add(cat, [var.name], "variable declared more than once")
        seen[var.name] = var.kind
        if not var.range:
            report.add("empty_range", [var.name], "range must be nonempty")
        if len(set(var.range)) != len(var.range):
            report.add("duplicate_value", [var.name], "range values must be unique")
    if not sig.exogenous:
        report.add("empty_exogenous", [], "at least one exogenous variable is required")
    if not sig.endogenous:
        report.add("empty_endogenous", [], "at least one endogenous variable is required")

    endo = {v.name for v in sig.endogenous}
    variables = sig.variables
    owners: dict[str, str] = {}
    for action, agent in sig.agent_of.items():
        if action not in endo:
            report.add("action_not_endogenous", [action], "action variables must be endogenous")
        if agent in owners:
            report.add("agent_multiple_actions", [owners[agent], action],
                       f"agent {agent!r} owns more than one action variable")
        owners[agent] = action

    targets = [eq.target for eq in model.equations]
    for name in sorted(endo - set(targets)):
        report.add("missing_equation", [name], "no structural equation")
    for name in sorted(set(targets) - endo):
        report.add("extra_equation", [name], "equation for a non-endogenous variable")
    for name in sorted({t for t in targets if targets.count(t) > 1}):
        report.add("duplicate_equation", [name], "more than one structural equation")

    values = {val for v in variables.values() for val in v.range}
    for name in sorted(values & set(variables)):
        report.add("ambiguous_name", [name], "name is both a variable and a range value")

    bound = {name: SYM for name in variables}
    for eq in model.equations:
        if eq.target not in endo:
            continue
        refs = names_in(eq.body)
        if eq.target in refs:
            report.add("self_reference", [eq.target], "equation refers to its own target")
        for ref in sorted(refs - set(variables) - values):
            report.add("unknown_name", [eq.target, ref], f"unknown name {ref!r}")
        try:
            kind = infer_kind(eq.body, bound)
        except ExprError as exc:
            report.add("type_error", [eq.target], str(exc))
            continue
        if kind != SYM:
            report.add("type_error", [eq.target], f"equation yields {kind}, expected a range value")

    deps = _dependencies(model)
    ts = TopologicalSorter({k: v - {k} for k, v in deps.items()})
    try:
        ts.prepare()
    except CycleError as exc:
        cycle = exc.args[1][:-1]
        report.add("cycle", sorted(cycle), "endogenous variables depend on each other cyclically")

    if report.ok:
        _check_ranges(model, report)
    return report


def _check_ranges(model: CausalModel, report: ValidationReport) -> None:
    variables = model.signature.variables
    for eq in model.equations:
        refs = sorted(names_in(eq.body) & set(variables))
        size = 1
        for r in refs:
            size *= len(variables[r].range)
        if size > RANGE_CHECK_LIMIT:
            continue
        grids = np.meshgrid(*[np.array([symbol_code(x) for x in variables[r].range]) for r in refs],
                            indexing="ij") if refs else []
        env = {r: (SYM, g.reshape(-1)) for r, g in zip(refs, grids)}
        try:
            _, out = eval_expr(eq.body, env)
        except ExprError as exc:
            report.add("type_error", [eq.target], str(exc))
            continue
        allowed = [symbol_code(x) for x in variables[eq.target].range]
        bad = ~np.isin(np.atleast_1d(out), allowed)
        if bad.any():
            value = symbol_name(np.atleast_1d(out)[bad][0])
            report.add("range_violation", [eq.target],
                       f"equation can produce {value!r}, outside the range of {eq.target}")


# -- evaluation -------------------------------------------------------------


def check_intervention(model: CausalModel, iv: Intervention) -> None:
    variables = model.signature.variables
    for name, value in iv.items():
        var = variables.get(name)
        if var is None or var.kind != ENDOGENOUS:
            raise SignatureMismatch(f"cannot intervene on {name!r}: not an endogenous variable")
        if value not in var.range:
            raise SignatureMismatch(f"{value!r} is not in the range of {name}")


def check_context(model: CausalModel, context: Mapping[str, str]) -> None:
    exo = {v.name: v for v in model.signature.exogenous}
    if set(context) != set(exo):
        missing = sorted(set(exo) - set(context))
        extra = sorted(set(context) - set(exo))
        raise SignatureMismatch(f"context mismatch (missing {missing}, unexpected {extra})")
    for name, value in context.items():
        if value not in exo[name].range:
            raise SignatureMismatch(f"{value!r} is not in the range of {name}")


def check_formula(model: CausalModel, phi: OutcomeFormula) -> None:
    variables = model.signature.variables
    values = {val for v in variables.values() for val in v.range}
    for ref in names_in(phi):
        if ref not in variables and ref not in values:
            raise SignatureMismatch(f"formula mentions unknown name {ref!r}")
    try:
        kind = infer_kind(phi, {n: SYM for n in variables})
    except ExprError as exc:
        raise SignatureMismatch(f"ill-typed formula: {exc}") from None
    if kind != BOOL:
        raise SignatureMismatch("an outcome formula must be boolean")


def solve_batch(
    model: CausalModel,
    contexts: Mapping[str, np.ndarray],
    iv: Intervention | None = None,
    order: Sequence[str] | None = None,
) -> dict[str, np.ndarray]:
    """Solve ``model`` for a batch of contexts given as arrays of symbol codes."""
    iv = iv or {}
    if order is None:
        order = model.topological_order
    else:
        model.topological_order  # validates
    variables = model.signature.variables
    size = len(next(iter(contexts.values()))) if contexts else 1
    env: dict[str, tuple[str, np.ndarray]] = {
        name: (SYM, np.asarray(arr)) for name, arr in contexts.items()
    }
    for name in order:
        if name in iv:
            env[name] = (SYM, np.full(size, symbol_code(iv[name]), dtype=np.int64))
            continue
        _, out = eval_expr(model.equation_for[name], env)
        out = np.broadcast_to(np.asarray(out, dtype=np.int64), (size,))
        allowed = [symbol_code(x) for x in variables[name].range]
        bad = ~np.isin(out, allowed)
        if bad.any():
            raise EquationRangeError(
                f"equation for {name} produced {symbol_name(out[bad][0])!r}, "
                f"outside {list(variables[name].range)}")
        env[name] = (SYM, out)
    return {name: value for name, (_, value) in env.items()}


def holds_batch(model: CausalModel, solution: Mapping[str, np.ndarray], phi: OutcomeFormula,
                size: int) -> np.ndarray:
    env = {name: (SYM, arr) for name, arr in solution.items()}
    kind, out = eval_expr(phi, env)
    if kind != BOOL:
        raise SignatureMismatch("an outcome formula must be boolean")
    return np.broadcast_to(np.asarray(out, dtype=bool), (size,))


def _single(setting: CausalSetting) -> dict[str, np.ndarray]:
    check_context(setting.model, setting.context)
    return {k: np.array([symbol_code(v)], dtype=np.int64) for k, v in setting.context.items()}


def evaluate(setting: CausalSetting, iv: Intervention | None = None,
             order: Sequence[str] | None = None) -> dict[str, str]:
    """Total assignment of every variable in ``setting`` under intervention ``iv``."""
    iv = dict(iv or {})
    check_intervention(setting.model, iv)
    solution = solve_batch(setting.model, _single(setting), iv, order)
    return {name: symbol_name(arr[0]) for name, arr in solution.items()}


def holds(setting: CausalSetting, iv: Intervention | None, phi: OutcomeFormula) -> bool:
    """Whether ``[iv] phi`` is true in ``setting``."""
    iv = dict(iv or {})
    check_intervention(setting.model, iv)
    check_formula(setting.model, phi)
    solution = solve_batch(setting.model, _single(setting), iv)
    return bool(holds_batch(setting.model, solution, phi, 1)[0])


def random_order(model: CausalModel, rng: np.random.Generator) -> tuple[str, ...]:
    """A uniformly chosen ready-node topological order (for order-independence checks)."""
    deps = {k: set(v) - {k} for k, v in _dependencies(model).items()}
    remaining = [v.name for v in model.signature.endogenous]
    placed: set[str] = set()
    order: list[str] = []
    while remaining:
        ready = [n for n in remaining if deps.get(n, set()) <= placed]
        pick = ready[int(rng.integers(len(ready)))]
        order.append(pick)
        placed.add(pick)
        remaining.remove(pick)
    return tuple(order)
