"""Exception types raised across the package."""


class NAFError(Exception):
    """Base class for all package errors."""


class ShapeError(NAFError, ValueError):
    """Array dimensions are inconsistent with the operation."""


class ConfigError(NAFError, ValueError):
    """A configuration value is invalid or unsupported."""


class BoundsError(NAFError, IndexError):
    """A position lies outside its grid."""


class FormatError(NAFError, ValueError):
    """A file is not a well-formed container."""


class UnsupportedTensorError(NAFError, ValueError):
    """A file holds a valid array that is not a float32 rank-3 tensor."""


class TrainingDiverged(NAFError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, iteration=None, dump_path=None):
        super().__init__(message)
        self.iteration = iteration
        self.dump_path = dump_path
