"""Exception types raised across the package."""


class HoverPipeError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(HoverPipeError, ValueError):
    pass


class UnknownLabel(HoverPipeError, KeyError):
    pass


class ImageTooSmall(HoverPipeError, ValueError):
    pass


class DegenerateHistogram(HoverPipeError, ValueError):
    pass


class MissingClass(HoverPipeError, KeyError):
    pass


class MarkerOutsideForeground(HoverPipeError, ValueError):
    pass


class PlacementFailed(HoverPipeError, RuntimeError):
    pass


class PatchLargerThanImage(HoverPipeError, ValueError):
    pass


class FormatError(HoverPipeError, ValueError):
    """A file on disk is malformed (bad magic, truncated payload, bad header)."""
