"""Exception types raised by the engine."""

from __future__ import annotations


class BlameError(Exception):
    """Base class for all errors raised by groupblame."""


class SignatureMismatch(BlameError):
    """An intervention, context or formula does not fit the model signature."""


class EquationRangeError(BlameError):
    """A structural equation produced a value outside its target's range."""


class ModelInvalid(BlameError):
    """A causal model failed validation and cannot be evaluated."""

    def __init__(self, findings):
        self.findings = list(findings)
        summary = "; ".join(str(f) for f in self.findings[:5])
        super().__init__(f"invalid causal model: {summary}")


class InvalidState(BlameError):
    """An epistemic state violates its probability invariants."""


class EnumerationBoundExceeded(BlameError):
    """Exact enumeration would exceed the configured context bound."""


class InvalidSampleCount(BlameError, ValueError):
    pass


class BalanceTooSmall(BlameError):
    """The balance parameter N does not exceed every finite cost."""


class ScenarioError(BlameError):
    """A scenario is structurally inconsistent."""


class TooManyAgents(BlameError):
    pass


class NotABijection(BlameError, ValueError):
    pass


class UnknownScenario(BlameError, KeyError):
    def __init__(self, name: str, available):
        self.name = name
        self.available = sorted(available)
        super().__init__(f"unknown scenario {name!r}; available: {', '.join(self.available)}")

    def __str__(self) -> str:
        return self.args[0]


class SerializationError(BlameError):
    """The scenario cannot be expressed in the textual format."""
