"""Exception types shared across the package."""


class RSNetError(Exception):
    """Base class for every error raised deliberately by rsnet."""


class DimensionError(RSNetError, ValueError):
    """Tensor shapes disagree along a named axis."""

    def __init__(self, message, axis=None, expected=None, got=None):
        self.axis = axis
        self.expected = expected
        self.got = got
        if axis is not None:
            message = f"{message} (axis {axis}: expected {expected}, got {got})"
        super().__init__(message)


class FormatError(RSNetError, ValueError):
    """A file or text payload could not be parsed.

    ``line`` is 1-based, ``offset`` is a byte offset; either may be None.
    """

    def __init__(self, message, path=None, line=None, offset=None):
        self.path = path
        self.line = line
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{': '.join(where)}: {message}"
        super().__init__(message)


class WeightsError(FormatError):
    """Weights file is corrupt or does not match the network description."""


class TruncatedError(FormatError):
    """Payload ended before the declared content."""


class SpecMismatchError(WeightsError):
    """Weights shapes disagree with the network description."""
