"""Exception hierarchy and process exit codes."""


class LlsError(Exception):
    """Base class for all simulator errors."""


class ConfigError(LlsError):
    """Invalid configuration text or violated parameter invariant.

    ``field`` names the offending parameter when known, so the config
    parser can attach the source line number.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class ParameterError(LlsError, ValueError):
    """An operation was called with an argument outside its contract."""


class DomainError(LlsError):
    """Input lies outside the mathematical domain of an operation."""


class ClearanceError(LlsError):
    """Market clearing failed (no price, bad bracket, or tolerance miss).

    ``diagnostics`` carries solver state useful for post-mortems.
    """

    def __init__(self, message: str, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class NumericError(LlsError):
    """A non-finite value appeared during a simulation step."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code contract."""
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, LlsError):
        return EXIT_NUMERIC
    raise exc
