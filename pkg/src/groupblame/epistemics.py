"""Epistemic states: probability distributions over causal settings.

Two representations share one query interface.  :class:`ExplicitState` lists
settings with weights; :class:`FactoredState` keeps one model and an
independent marginal per exogenous variable, which is what the committee and
commons scenarios need without paying for an explicit 2^k expansion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from groupblame.causal import (
    CausalModel,
    CausalSetting,
    Intervention,
    OutcomeFormula,
    check_context,
    check_formula,
    check_intervention,
    holds_batch,
    solve_batch,
)
from groupblame.errors import EnumerationBoundExceeded, InvalidSampleCount, InvalidState
from groupblame.expressions import symbol_code

DEFAULT_ENUMERATION_BOUND = 2**22
WEIGHT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ExplicitState:
    """A finite list of ``(setting, weight)`` pairs; zero weights are dropped."""

    settings: tuple[tuple[CausalSetting, float], ...]

    def __post_init__(self):
        entries = tuple((s, float(w)) for s, w in self.settings)
        if not entries:
            raise InvalidState("an explicit state needs at least one setting")
        for _, w in entries:
            if not (0.0 <= w <= 1.0):
                raise InvalidState(f"weight {w!r} outside [0, 1]")
        total = math.fsum(w for _, w in entries)
        if abs(total - 1.0) > WEIGHT_TOLERANCE:
            raise InvalidState(f"weights sum to {total!r}, not 1")
        shape = _shape(entries[0][0].model)
        for setting, _ in entries:
            if _shape(setting.model) != shape:
                raise InvalidState("all settings must share variable names and ranges")
            check_context(setting.model, setting.context)
        kept = tuple((s, w) for s, w in entries if w > 0.0)
        object.__setattr__(self, "settings", kept)

    @property
    def reference_model(self) -> CausalModel:
        return self.settings[0][0].model

    def map_models(self, fn) -> "ExplicitState":
        cache: dict[int, CausalModel] = {}
        out = []
        for setting, w in self.settings:
            key = id(setting.model)
            if key not in cache:
                cache[key] = fn(setting.model)
            out.append((CausalSetting(cache[key], setting.context), w))
        return ExplicitState(tuple(out))


@dataclass(frozen=True)
class FactoredState:
    """One model with independent per-exogenous-variable marginals."""

    model: CausalModel
    marginals: Mapping[str, Mapping[str, float]]

    def __post_init__(self):
        exo = {v.name: v for v in self.model.signature.exogenous}
        if set(self.marginals) != set(exo):
            raise InvalidState(
                f"marginals must cover exactly the exogenous variables {sorted(exo)}")
        clean: dict[str, dict[str, float]] = {}
        for name, var in exo.items():
            dist = self.marginals[name]
            unknown = set(dist) - set(var.range)
            if unknown:
                raise InvalidState(f"marginal of {name} mentions {sorted(unknown)} outside its range")
            probs = {value: float(dist.get(value, 0.0)) for value in var.range}
            for value, p in probs.items():
                if not (0.0 <= p <= 1.0):
                    raise InvalidState(f"P({name}={value}) = {p!r} outside [0, 1]")
            total = math.fsum(probs.values())
            if abs(total - 1.0) > WEIGHT_TOLERANCE:
                raise InvalidState(f"marginal of {name} sums to {total!r}, not 1")
            clean[name] = probs
        object.__setattr__(self, "marginals", clean)

    @property
    def reference_model(self) -> CausalModel:
        return self.model

    def context_space(self) -> int:
        return math.prod(len(v.range) for v in self.model.signature.exogenous)


EpistemicState = Union[ExplicitState, FactoredState]


@dataclass(frozen=True)
class ProbabilityEstimate:
    value: float
    stderr: float = 0.0
    n_samples: int = 0
    seed: int | None = None

    @property
    def exact(self) -> bool:
        return self.n_samples == 0

    def __float__(self) -> float:
        return self.value


def _shape(model: CausalModel):
    sig = model.signature
    return tuple((v.name, v.kind, v.range) for v in (*sig.exogenous, *sig.endogenous))


def _clip(p: float) -> float:
    return min(1.0, max(0.0, p))


def _ratio(hits, everything) -> float:
    # dividing by the accumulated total makes tautologies exactly 1 despite rounding
    total = math.fsum(everything)
    return _clip(math.fsum(hits) / total) if total > 0 else 0.0


def _check_query(model: CausalModel, iv: Intervention, phi: OutcomeFormula) -> None:
    check_intervention(model, iv)
    check_formula(model, phi)


def _factored_grid(state: FactoredState, bound: int):
    space = state.context_space()
    if space > bound:
        raise EnumerationBoundExceeded(
            f"{space} joint contexts exceed the exact bound {bound}; use sample_prob")
    exo = state.model.signature.exogenous
    if not exo:
        return {}, np.ones(1)
    axes = [np.arange(len(v.range)) for v in exo]
    grids = np.meshgrid(*axes, indexing="ij")
    contexts = {}
    weights = np.ones(space)
    for var, grid in zip(exo, grids):
        idx = grid.reshape(-1)
        codes = np.array([symbol_code(x) for x in var.range], dtype=np.int64)
        probs = np.array([state.marginals[var.name][x] for x in var.range])
        contexts[var.name] = codes[idx]
        weights = weights * probs[idx]
    return contexts, weights


def _explicit_groups(state: ExplicitState):
    """Group settings that share a model object so each group solves in one batch."""
    groups: dict[int, tuple[CausalModel, list]] = {}
    for setting, w in state.settings:
        groups.setdefault(id(setting.model), (setting.model, []))[1].append((setting.context, w))
    for model, entries in groups.values():
        names = [v.name for v in model.signature.exogenous]
        contexts = {n: np.array([symbol_code(ctx[n]) for ctx, _ in entries], dtype=np.int64)
                    for n in names}
        yield model, contexts, np.array([w for _, w in entries])


def prob(state: EpistemicState, iv: Intervention | None, phi: OutcomeFormula,
         bound: int = DEFAULT_ENUMERATION_BOUND) -> ProbabilityEstimate:
    """Exact probability that ``[iv] phi`` holds under ``state``."""
    iv = dict(iv or {})
    _check_query(state.reference_model, iv, phi)
    if isinstance(state, FactoredState):
        contexts, weights = _factored_grid(state, bound)
        size = len(weights)
        solution = solve_batch(state.model, contexts, iv)
        mask = holds_batch(state.model, solution, phi, size)
        return ProbabilityEstimate(_ratio(weights[mask].tolist(), weights.tolist()))
    hits, everything = [], []
    for model, contexts, weights in _explicit_groups(state):
        solution = solve_batch(model, contexts, iv)
        mask = holds_batch(model, solution, phi, len(weights))
        hits.extend(weights[mask].tolist())
        everything.extend(weights.tolist())
    return ProbabilityEstimate(_ratio(hits, everything))


def expand(state: FactoredState, bound: int = DEFAULT_ENUMERATION_BOUND) -> ExplicitState:
    """Explicit list of every positive-weight joint context of a factored state."""
    space = state.context_space()
    if space > bound:
        raise EnumerationBoundExceeded(f"{space} joint contexts exceed the exact bound {bound}")
    exo = state.model.signature.exogenous
    entries = []
    for combo in np.ndindex(*[len(v.range) for v in exo]):
        context = {v.name: v.range[i] for v, i in zip(exo, combo)}
        w = math.prod(state.marginals[v.name][context[v.name]] for v in exo)
        if w > 0.0:
            entries.append((CausalSetting(state.model, context), w))
    # the product weights already sum to 1 up to rounding; renormalise to absorb it
    total = math.fsum(w for _, w in entries)
    return ExplicitState(tuple((s, w / total) for s, w in entries))


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def sample_contexts(state: EpistemicState, n: int, rng: np.random.Generator):
    """Draw ``n`` settings from ``state``; yields ``(model, contexts)`` batches."""
    if isinstance(state, FactoredState):
        contexts = {}
        for var in state.model.signature.exogenous:
            codes = np.array([symbol_code(x) for x in var.range], dtype=np.int64)
            probs = np.array([state.marginals[var.name][x] for x in var.range])
            contexts[var.name] = codes[rng.choice(len(codes), size=n, p=probs / probs.sum())]
        yield state.model, contexts
        return
    weights = np.array([w for _, w in state.settings])
    picks = rng.choice(len(weights), size=n, p=weights / weights.sum())
    by_model: dict[int, tuple[CausalModel, list]] = {}
    for i in picks:
        setting = state.settings[int(i)][0]
        by_model.setdefault(id(setting.model), (setting.model, []))[1].append(setting.context)
    for model, ctxs in by_model.values():
        names = [v.name for v in model.signature.exogenous]
        yield model, {k: np.array([symbol_code(c[k]) for c in ctxs], dtype=np.int64) for k in names}


def sample_prob(state: EpistemicState, iv: Intervention | None, phi: OutcomeFormula,
                n: int, seed: int, stream: int = 0) -> ProbabilityEstimate:
    """Monte Carlo estimate of ``Pr([iv] phi)`` from ``n`` settings drawn from ``state``."""
    if n < 1:
        raise InvalidSampleCount("n must be at least 1")
    iv = dict(iv or {})
    _check_query(state.reference_model, iv, phi)
    rng = make_rng(seed, stream)
    hits = 0
    for model, contexts in sample_contexts(state, n, rng):
        size = len(next(iter(contexts.values()))) if contexts else n
        solution = solve_batch(model, contexts, iv)
        hits += int(holds_batch(model, solution, phi, size).sum())
    p = hits / n
    return ProbabilityEstimate(p, math.sqrt(p * (1.0 - p) / n), n, seed)


def with_model(state: EpistemicState, fn) -> EpistemicState:
    """Apply ``fn`` to every causal model inside ``state``."""
    if isinstance(state, FactoredState):
        return FactoredState(fn(state.model), state.marginals)
    return state.map_models(fn)


def models_of(state: EpistemicState) -> list[CausalModel]:
    if isinstance(state, FactoredState):
        return [state.model]
    seen: dict[int, CausalModel] = {}
    for setting, _ in state.settings:
        seen.setdefault(id(setting.model), setting.model)
    return list(seen.values())
