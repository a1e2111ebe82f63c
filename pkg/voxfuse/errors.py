"""Exception hierarchy shared by the library, the CLI and the HTTP service."""
from typing import Optional, Tuple


class VoxfuseError(Exception):
    """Base class for every error raised on purpose by voxfuse."""


class DomainError(VoxfuseError, ValueError):
    """An input lies outside the numerical domain of an operation."""


class EmptyDomainError(DomainError):
    """A reduction was requested over an empty set."""


class DegenerateFeatureError(DomainError):
    """A feature vector or embedding has zero norm."""


class CoverageError(DomainError):
    """An output pixel is not covered by any crop."""

    def __init__(self, pixel: Tuple[int, int], message: Optional[str] = None):
        self.pixel = pixel
        super().__init__(message or f"pixel (x={pixel[0]}, y={pixel[1]}) is not covered by any crop")


class DataError(VoxfuseError):
    """Input files are missing, malformed or inconsistent."""


class ConfigError(VoxfuseError):
    """A configuration key or value is invalid."""


# CLI exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DOMAIN = 3


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, DomainError):
        return EXIT_DOMAIN
    if isinstance(error, DataError):
        return EXIT_DATA
    if isinstance(error, ConfigError):
        return EXIT_USAGE
    return EXIT_DATA
