"""Exception types shared across the package."""


class DomainSplitError(Exception):
    """Base class for package errors."""


class ConfigError(DomainSplitError, ValueError):
    """Invalid configuration value or combination."""


class FormatError(DomainSplitError, ValueError):
    """Input data or a file does not have the expected layout."""


class InputError(DomainSplitError, ValueError):
    """A tensor argument has the wrong shape or an out-of-range value."""


class NonFiniteLossError(DomainSplitError, RuntimeError):
    """Raised by the trainer when a loss component becomes NaN or inf."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


class BatchCompositionWarning(UserWarning):
    """A batch lacks the domain mix a loss term needs; affected terms were skipped."""
