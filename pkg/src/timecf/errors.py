"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(ValueError):
    """An operation was called with an out-of-range parameter."""


class UsageError(ValueError):
    """An API was called in a way its contract forbids."""


class EvaluationError(RuntimeError):
    """A numeric evaluation produced non-finite values."""


class ConfigurationError(ValueError):
    """A configuration violates its invariants."""


class DataFormatError(ValueError):
    """An input file does not match the expected format."""


class NonFiniteLossError(RuntimeError):
    """A training step produced a non-finite loss.

    Carries the index of the offending batch when raised from the
    training loop.
    """

    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


class TrainingAbortedError(RuntimeError):
    """Training was aborted after repeated non-finite losses."""
