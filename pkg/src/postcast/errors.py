"""Exception types shared across the engine.

Everything user-correctable derives from ValidationError so the CLI can map
it to exit code 2 and the service to a 4xx response.
"""


class PostcastError(Exception):
    """Base class for engine errors."""


class ValidationError(PostcastError, ValueError):
    """Invalid input: bad values, bad parameters, malformed files."""


class DimensionError(ValidationError):
    """Tensor shapes do not line up."""


class DomainError(ValidationError):
    """A value is outside the mathematical domain of an operation."""


class ConfigError(ValidationError):
    """Configuration is structurally valid but unusable (splits too short, ...)."""


class CsvParseError(ValidationError):
    """CSV ingestion failure; message carries row/column location."""


class AlignmentError(ValidationError):
    """Predictions and truth windows cannot be joined."""


class PlanStepError(ValidationError):
    """A plan step failed; carries the step index."""

    def __init__(self, step_index: int, message: str):
        self.step_index = step_index
        super().__init__(f"plan step {step_index}: {message}")


class StateConflictError(PostcastError):
    """Operation not legal in the session's current state."""


class TransportError(PostcastError):
    """Network-level failure talking to an external endpoint."""
