"""Exception types shared across the package."""


class SiedobError(Exception):
    """Base class for all package errors."""


class DimensionError(SiedobError):
    """Inputs disagree on spatial size or channel count."""


class ValidationError(SiedobError):
    """An input violates a documented precondition."""


class ConfigurationError(SiedobError):
    """A config or loss recipe is missing required pieces."""


class NoStylesError(SiedobError):
    """The style bank has no entry for the requested class."""


class StageError(SiedobError):
    """A pipeline stage cannot run (missing checkpoint, bad hash, ...)."""


class TrainingFault(SiedobError):
    """Training produced a non-finite loss."""
