"""Exception hierarchy.

``ValidationError`` subclasses signal bad input (CLI exit code 1); everything
else deriving from ``WeightSpaceError`` is a runtime failure (exit code 2).
"""

from __future__ import annotations


class WeightSpaceError(Exception):
    """Base class for all package errors."""


class ValidationError(WeightSpaceError):
    """Input or configuration rejected before any work was done."""


class FormatError(ValidationError):
    pass


class UnsupportedDtype(ValidationError):
    pass


class InvariantViolation(ValidationError):
    pass


class EmptyLayer(ValidationError):
    pass


class LayoutMismatch(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class DegenerateBatch(ValidationError):
    pass


class DegenerateData(ValidationError):
    pass


class DegenerateTargets(ValidationError):
    pass


class BatchTooSmall(ValidationError):
    pass


class EmptySequence(ValidationError):
    pass


class EmptyCollection(ValidationError):
    pass


class EmptySchedule(ValidationError):
    pass


class IoError(WeightSpaceError, OSError):
    pass


class DivergenceError(WeightSpaceError):
    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"loss diverged at step {step}")


class PartialReport(WeightSpaceError):
    """Raised when a run directory lacks one or more stage outputs.

    The merged report for the stages that do exist is kept on ``report``.
    """

    def __init__(self, report: dict, missing: list[str]):
        self.report = report
        self.missing = list(missing)
        super().__init__("missing stages: " + ", ".join(self.missing))
