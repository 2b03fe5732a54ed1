"""Exception types shared across the engine."""


class NeurtError(Exception):
    pass


class ConfigError(NeurtError, ValueError):
    """Invalid configuration, shape mismatch or malformed input file."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class UsageError(NeurtError, RuntimeError):
    """API called in the wrong order (e.g. backward without a recorded forward)."""


class DegenerateError(NeurtError, ArithmeticError):
    """Geometric degeneracy: vanishing gradient, antipodal half vector, coincident light."""
