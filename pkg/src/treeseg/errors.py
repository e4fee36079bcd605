"""Exception types shared across the package.

Validation-style errors (bad inputs, bad configs) all derive from
``ValidationError`` so the CLI can map them to exit code 1; everything
else is treated as a runtime failure (exit code 2).
"""


class TreesegError(Exception):
    """Base class for all package errors."""


class ValidationError(TreesegError):
    """Base class for input/config validation failures."""


class ParseError(ValidationError):
    """Hierarchy document is malformed (bad JSON, duplicate or missing names)."""


class StructureError(ValidationError):
    """Hierarchy is not a valid rooted tree (cycle, multiple roots/parents)."""


class WeightError(ValidationError):
    """An edge weight is negative or otherwise unusable."""


class RangeError(ValidationError):
    """A level index or similar bounded argument is out of range."""


class NormalizationError(ValidationError):
    """A probability vector does not sum to one or has negative entries."""


class LabelError(ValidationError):
    """A pixel carries a class code outside the valid range."""


class EmptyMaskError(ValidationError):
    """A loss was asked to average over zero annotated pixels."""


class EmptyEvalError(ValidationError):
    """An evaluation was asked to score an empty annotation domain."""


class ConfigError(ValidationError):
    """Inconsistent or infeasible configuration."""


class ShapeError(ValidationError):
    """Array shapes do not match the model or field they are used with."""


class DivergenceError(TreesegError):
    """Training produced a non-finite loss. Carries the offending epoch."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")
