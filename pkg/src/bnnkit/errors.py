"""Shared exception types.

Failure modes that callers are expected to branch on get their own class;
everything else raises plain ValueError.
"""


class BnnkitError(Exception):
    """Base class for package-specific failures."""


class SingularMatrixError(BnnkitError):
    """Least-squares design is rank deficient (after one jitter retry)."""


class DegenerateSequenceError(BnnkitError):
    """A sequence has zero variance where a variance-based statistic is needed.

    Raised instead of returning inf/NaN so that constant (dying) chains are
    distinguishable from numeric failures.
    """


class LayoutError(BnnkitError):
    """Parameter vector does not match the network layout."""


class UnsupportedTransformError(BnnkitError):
    """A symmetry transform was requested for an activation it does not apply to."""


class DivergedTrainingError(BnnkitError):
    """Optimization hit a non-finite loss."""

    def __init__(self, epoch, message=""):
        self.epoch = epoch
        super().__init__(message or f"non-finite training loss at epoch {epoch}")


class DyingSamplerError(BnnkitError):
    """Step-size adaptation collapsed below the underflow floor."""


class UnrecoverableStateError(BnnkitError):
    """Sampler state has a non-finite log-density or gradient; chain cannot continue."""


class AllChainsFailedError(BnnkitError):
    """Every chain of a chain set failed."""


class InsufficientHistoryError(BnnkitError):
    """Online convergence check queried before the window is filled."""


class CsvFormatError(BnnkitError):
    """CSV ingestion failure, addressed by line/column."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + loc)


class ConfigError(BnnkitError):
    """Invalid experiment configuration; reported before any compute."""
