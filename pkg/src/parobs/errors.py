"""Exception types shared across the package."""

from __future__ import annotations


class RejectedInputError(ValueError):
    """Input violates a documented precondition."""


class SolverFailureError(RuntimeError):
    """The complementarity solver did not reach the requested residual."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class DegenerateSupportError(RuntimeError):
    """The positivity set became empty where the model requires it nonempty."""


class InconsistentStateError(RuntimeError):
    """A run reached a state the model forbids (e.g. empty support with mass)."""


class DomainTooSmallError(RejectedInputError):
    """The truncated domain cannot contain the expected support."""


class CalibrationError(RuntimeError):
    """Block calibration could not produce a usable constant."""


class GateViolationError(RejectedInputError):
    """A hierarchy admissibility gate failed.

    Carries the semantic gate id and the numbers that violated it so callers
    can adjust the scale sequence.
    """

    def __init__(self, gate: str, message: str, values: dict | None = None):
        super().__init__(f"gate {gate!r}: {message}")
        self.gate = gate
        self.values = dict(values or {})


class MissingInputError(RejectedInputError):
    """A verification bundle lacks a required artifact."""
