"""Exception types shared across the package."""


class BroxlabError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(BroxlabError):
    """Raised for invalid sampler or experiment parameters."""


class DomainError(BroxlabError):
    """Raised when an evaluation point or argument lies outside its domain."""


class HorizonError(BroxlabError):
    """Raised when a requested time or level is beyond the simulated horizon."""


class InsufficientDataError(BroxlabError):
    """Raised when a statistical test receives too few samples."""
