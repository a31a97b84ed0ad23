"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class BackoffLabError(Exception):
    """Base class for every error raised by the package."""


class InvalidFamilyParameter(BackoffLabError, ValueError):
    pass


class IndexUnavailable(BackoffLabError, IndexError):
    pass


class NumericOverflow(BackoffLabError, OverflowError):
    pass


class IncompatibleLengths(BackoffLabError, ValueError):
    pass


class InvalidInitialPopulation(BackoffLabError, ValueError):
    pass


class ModeUnsupported(BackoffLabError):
    pass


class CouplingPreconditionViolated(BackoffLabError):
    pass


class InvariantViolation(BackoffLabError, AssertionError):
    pass


class DomainViolation(BackoffLabError, ValueError):
    pass


class InsufficientSamples(BackoffLabError, ValueError):
    pass


class UnknownSeries(BackoffLabError, KeyError):
    pass


class ParseError(BackoffLabError, ValueError):
    """Malformed configuration text; carries the offending position."""

    def __init__(self, message: str, line: int, column: int) -> None:
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class ValidationError(BackoffLabError, ValueError):
    """Configuration parsed but violates one or more constraints."""

    def __init__(self, problems: list[str]) -> None:
        super().__init__("; ".join(problems))
        self.problems = list(problems)
