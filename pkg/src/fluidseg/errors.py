"""Exception types shared across the package.

The CLI maps these onto its exit-code contract, so raising the right kind
matters more than the message text.
"""


class FluidsegError(Exception):
    """Base class for package errors."""


class ConfigError(FluidsegError, ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DimensionError(FluidsegError, ValueError):
    """Tensor or mask shapes violate an operation's contract."""


class ContractError(FluidsegError, ValueError):
    """A call broke an API precondition unrelated to array shape."""


class DataError(FluidsegError, ValueError):
    """Annotation or dataset content is invalid (CLI exit code 3)."""


class FormatError(FluidsegError, ValueError):
    """A serialized artifact is corrupt or has the wrong format (exit code 3)."""


class DivergenceError(FluidsegError, RuntimeError):
    """Training produced a non-finite loss (CLI exit code 4)."""
