"""Exception hierarchy shared by all hessreg modules."""


class HessregError(Exception):
    """Base class for every error raised by this package."""


class FormatError(HessregError):
    """A file could not be parsed (bad header, unsupported dtype, ...)."""


class GeometryError(HessregError):
    """Grid geometry is unusable or inconsistent between inputs."""


class DataError(HessregError):
    """Array contents violate an invariant (non-finite values, size mismatch)."""


class ParameterError(HessregError, ValueError):
    """An argument is outside its admissible range."""


class PreprocessingError(HessregError):
    """Registration preprocessing produced too few usable samples."""


class OptimizationError(HessregError):
    """The optimizer cannot proceed (e.g. no finite cost in the population)."""
