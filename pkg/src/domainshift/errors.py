"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`DomainShiftError`
so callers (and the CLI) can catch them in one place.
"""

from __future__ import annotations


class DomainShiftError(Exception):
    """Base class for all package errors."""


# -- dataset ---------------------------------------------------------------


class MissingFile(DomainShiftError, FileNotFoundError):
    pass


class CsvFormatError(DomainShiftError, ValueError):
    """Malformed CSV content; ``line`` is the 1-based line in the file."""

    def __init__(self, message: str, line: int, col: int | None = None):
        super().__init__(message)
        self.line = line
        self.col = col


class RaggedRow(CsvFormatError):
    pass


class NonNumericCell(CsvFormatError):
    pass


class NonFiniteValue(CsvFormatError):
    pass


class DimensionMismatch(DomainShiftError, ValueError):
    pass


class EmptyInput(DomainShiftError, ValueError):
    pass


class InactiveQuery(DomainShiftError, ValueError):
    pass


class EmptyIndex(DomainShiftError, ValueError):
    pass


# -- score -----------------------------------------------------------------


class InvalidProbability(DomainShiftError, ValueError):
    pass


class CountOutOfRange(DomainShiftError, ValueError):
    pass


class EmptySequence(DomainShiftError, ValueError):
    pass


class EmptyCohort(DomainShiftError, ValueError):
    pass


class TooFewSamples(DomainShiftError, ValueError):
    pass


class InvalidLevel(DomainShiftError, ValueError):
    pass


# -- equalize --------------------------------------------------------------


class EmptyNullTail(DomainShiftError, ValueError):
    pass


class InactiveCandidate(DomainShiftError, ValueError):
    pass


class EmptyPrunedSet(DomainShiftError, ValueError):
    pass


class MaxItersExceeded(DomainShiftError, RuntimeError):
    """Raised only on request; :func:`equalize` normally flags instead."""


# -- subspace --------------------------------------------------------------


class NonFiniteParameter(DomainShiftError, ValueError):
    pass


class DegenerateBatch(DomainShiftError, ValueError):
    pass


class NoQueriesInBatch(DomainShiftError, ValueError):
    """The batch holds no query rows; the optimiser skips the step."""


class InsufficientQueries(DomainShiftError, ValueError):
    pass


class SubsetOutOfRange(DomainShiftError, ValueError):
    pass


class TooFewSamplesPerFold(DomainShiftError, ValueError):
    pass


# -- baseline / cli --------------------------------------------------------


class UntrainedModel(DomainShiftError, RuntimeError):
    pass


class EmptyInjectedSet(DomainShiftError, ValueError):
    pass


class InvalidSpec(DomainShiftError, ValueError):
    pass


class SchemaMismatch(DomainShiftError, ValueError):
    pass


class StageError(DomainShiftError):
    """Wraps a failure with the pipeline stage it happened in."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
