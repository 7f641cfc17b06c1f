"""Toolkit exceptions."""

from typing import Optional


class UltrError(Exception):
    """Base class for all toolkit errors."""


class ParseError(UltrError, ValueError):
    """Error raised when an input stream is malformed."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line

        if line is not None:
            message = f"line {line}: {message}"

        super().__init__(message)


class ValidationError(UltrError, ValueError):
    """Error raised when well-formed data violates a domain invariant."""


class EstimationError(UltrError):
    """Error raised when a propensity curve cannot be estimated from the data."""


class TrainingError(UltrError):
    """Error raised when training diverges."""


class PipelineError(UltrError):
    """Error raised when an experiment stage fails."""

    def __init__(self, stage: str, message: str):
        self.stage = stage

        super().__init__(f"Stage '{stage}' failed: {message}")
