"""Exception types shared across the package."""

from __future__ import annotations


class TraceBenchError(Exception):
    """Base class for input errors (CLI exit code 1)."""


class InvalidBox(TraceBenchError, ValueError):
    pass


class DegenerateBox(InvalidBox):
    """Pixel rectangle with zero (or negative) extent on one axis."""


class InvalidDistribution(TraceBenchError, ValueError):
    pass


class DuplicateStudyOrder(TraceBenchError):
    pass


class UnassignedPatient(TraceBenchError, KeyError):
    def __str__(self) -> str:  # KeyError repr-quotes its message otherwise
        return Exception.__str__(self)


class SampleIdMismatch(TraceBenchError):
    pass


class DuplicatePredictionId(TraceBenchError):
    pass


class ConfigMismatch(TraceBenchError):
    pass


class UnsortedInput(TraceBenchError):
    pass


class MalformedInputLine(TraceBenchError):
    """A JSONL/CSV line that could not be decoded into the expected record."""

    def __init__(self, path: str, line_no: int, reason: str):
        self.path = path
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"{path}:{line_no}: {reason}")
