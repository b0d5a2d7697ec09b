"""Exception types shared across the engine."""


class ConfigurationError(ValueError):
    """Invalid static configuration: bad dimensions, unknown env kind, bad hyperparameters."""


class UsageError(RuntimeError):
    """API misuse at runtime, e.g. stepping a finished episode without reset."""


class ProtocolError(RuntimeError):
    """Violation of the worker/learner queue protocol: version mismatch or regression,
    all workers dead while gathering, and similar."""


class SnapshotDecodeError(ValueError):
    """Raised when a parameter-snapshot byte buffer is truncated or malformed."""


class NonFiniteUpdateError(ValueError):
    """A loss or gradient came out non-finite; the surrounding update must be skipped."""
