"""Exception types shared across the package."""


class GaecirError(Exception):
    """Base class for all package errors."""


class ConfigError(GaecirError):
    """Invalid configuration value or unknown configuration key."""


class ShapeError(GaecirError):
    """Array dimensions inconsistent with the model configuration."""


class NumericalError(GaecirError):
    """Non-finite values encountered during training or gradient computation."""


class InsufficientPopulationError(GaecirError):
    """Not enough candidates for neighbor search or partner sampling."""


class FormatError(GaecirError):
    """Malformed binary file (bad magic, bad header, inconsistent dims)."""


class TruncationError(FormatError):
    """File shorter than its header declares."""


class DegenerateInputError(GaecirError):
    """Input that cannot be processed (e.g. a constant image)."""


class IncompatibilityError(GaecirError):
    """Checkpoint and dataset dimensions do not match."""
