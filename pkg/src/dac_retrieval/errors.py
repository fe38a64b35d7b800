"""Exception hierarchy shared by every module."""


class DacError(Exception):
    """Base class for all library errors."""


class ShapeError(DacError, ValueError):
    pass


class DegenerateVectorError(DacError, ValueError):
    pass


class ConfigError(DacError, ValueError):
    pass


class DataError(DacError, ValueError):
    pass


class UsageError(DacError, RuntimeError):
    pass


class FormatError(DacError, ValueError):
    """Malformed or corrupt feature container."""
