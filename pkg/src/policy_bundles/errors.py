"""Exception hierarchy shared by every stage."""


class PolicyBundleError(Exception):
    """Base class for all package errors."""


class ConfigError(PolicyBundleError, ValueError):
    """Invalid run configuration or parameter."""


class DataError(PolicyBundleError, ValueError):
    """Input data violates a schema or invariant."""


class IngestError(DataError):
    """A malformed row in a delimited input file.

    ``line`` is the 1-based physical line number, or ``None`` when the error
    is not tied to a single row.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(PolicyBundleError, ArithmeticError):
    """A numerical procedure failed (singular system, negative variance...)."""


class ConvergenceError(NumericalError):
    """IRLS did not converge or diverged.

    ``trajectory`` holds the deviance after every completed iteration.
    """

    def __init__(self, message, trajectory=()):
        self.trajectory = list(trajectory)
        super().__init__(message)
