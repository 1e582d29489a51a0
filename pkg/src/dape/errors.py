"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: validation 2, runtime/numeric 3,
external client 4.
"""


class DapeError(Exception):
    exit_code = 3


class ConfigError(DapeError, ValueError):
    exit_code = 2


class ValidationError(DapeError, ValueError):
    exit_code = 2


class ShapeError(DapeError, ValueError):
    exit_code = 2


class StateError(DapeError, RuntimeError):
    exit_code = 3


class NumericError(DapeError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class IngestionError(DapeError):
    exit_code = 3


class ManifestError(DapeError, ValueError):
    exit_code = 2

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ClientError(DapeError):
    """Retryable failure of an external annotation/embedding/flow service."""

    exit_code = 4
