from __future__ import annotations


class PromptScopeError(RuntimeError):
    """Base class for every error raised by promptscope."""


class InvalidBoxError(PromptScopeError, ValueError):
    """Raised when box coordinates violate the relative (cx, cy, w, h) contract."""


class EmptyInputError(PromptScopeError, ValueError):
    """Raised when an operation that needs at least one item receives none."""


class ShapeMismatchError(PromptScopeError, ValueError):
    """Raised when tensor or sequence shapes do not line up."""


class UnknownTokenError(PromptScopeError, ValueError):
    """Raised when text contains a word outside the closed vocabulary."""


class MatchingError(PromptScopeError):
    """Raised when box matching cannot be performed (e.g. zero targets)."""


class NonFiniteError(PromptScopeError):
    """Raised when a loss, gradient or objective becomes NaN or infinite."""


class MissingLossTermError(PromptScopeError, KeyError):
    """Raised when a stage objective is missing one of its required terms."""


class CheckpointIncompatibleError(PromptScopeError):
    """Raised when a checkpoint does not fit the configured architecture."""


class SchemaViolationError(PromptScopeError, ValueError):
    """Raised when a config, annotation or prediction file fails validation."""


class DegenerateMetricError(PromptScopeError, ValueError):
    """Raised when a metric has no valid input (e.g. bootstrap over zero samples)."""
