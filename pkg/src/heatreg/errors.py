"""Exception types shared across the package."""


class HeatregError(Exception):
    """Base class for all package errors."""


class InputError(HeatregError, ValueError):
    """An argument violates a documented precondition."""


class StaleCacheError(HeatregError, RuntimeError):
    """An activation cache no longer matches the network that produced it."""


class FileFormatError(InputError):
    """A volume file is malformed; the message names the offending field."""
