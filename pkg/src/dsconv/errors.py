"""Exception types raised across the package."""


class DSConvError(Exception):
    """Base class for all package errors."""


class ShapeError(DSConvError, ValueError):
    """Tensor extents are inconsistent with each other or with a config."""


class ConfigError(DSConvError, ValueError):
    """A quantization or convolution parameter is out of its valid range."""


class DegenerateBlockError(DSConvError, ValueError):
    """A block has no information to fit a scale against (all-zero integers)."""


class FormatError(DSConvError, ValueError):
    """A serialized file is malformed.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
