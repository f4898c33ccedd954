"""Exception hierarchy shared across the toolkit.

``ConfigError`` maps to CLI exit code 2 and runtime failures
(``TrainingDiverged`` and friends) to exit code 3.
"""


class SemodError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(SemodError, ValueError):
    """A value violates its domain contract (range, shape, finiteness)."""


class UnmappedCategoryError(SemodError, KeyError):
    """A source category has no entry in the label mapping."""

    def __init__(self, tag: str):
        super().__init__(tag)
        self.tag = tag

    def __str__(self) -> str:
        return f"unmapped source category: {self.tag!r}"


class ManifestError(SemodError):
    """A manifest file is malformed; carries the offending line number."""

    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class ConfigError(SemodError):
    """Invalid user-supplied configuration (file or flags)."""


class TrainingDiverged(SemodError):
    """Training produced a non-finite loss and was aborted."""
