"""Exception types shared across the package.

Every failure mode that callers are expected to handle gets its own
class so the CLI can map categories onto exit codes without string
matching.
"""


class AvdocError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(AvdocError):
    """Bad, unknown, or inconsistent configuration value."""


class DataFormatError(AvdocError):
    """Malformed manifest row, checkpoint, or other on-disk artifact."""


class DimensionError(AvdocError):
    """Tensor shapes incompatible with the requested operation."""


class ContractError(AvdocError):
    """An API precondition was violated by the caller."""


class DegenerateError(AvdocError):
    """An input is numerically degenerate (e.g. zero vector to cosine)."""


class NumericsError(AvdocError):
    """A computation produced a non-finite value."""


class TrainingDivergedError(AvdocError):
    """Loss failed to improve or blew up during a training stage."""
