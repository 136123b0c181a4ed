"""Exception types raised across the package."""

from typing import Optional


class NodsegError(Exception):
    """Base class for every error raised by nodseg."""


class InvalidInputError(NodsegError, ValueError):
    """Input rejected: out-of-bounds point, dimension mismatch, malformed annotation."""


class ConfigError(NodsegError, ValueError):
    """Invalid configuration value or mode combination."""


class UndefinedMetricError(NodsegError):
    """A ratio whose denominator is empty (e.g. precision of an empty label)."""


class DegenerateLabelError(NodsegError):
    """A label that cannot supervise the requested loss (e.g. empty location label)."""


class MissingPrototypeError(NodsegError):
    """A prototype region is empty at feature resolution."""


class GradientCheckError(NodsegError):
    """Finite-difference check could not be evaluated (non-finite loss)."""


class IngestionError(NodsegError):
    """A dataset file could not be read."""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(f"{message}: {path}" if path else message)
        self.path = path
