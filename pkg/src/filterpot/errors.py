"""Exception types shared across the package."""


class FilterPotError(Exception):
    """Base class for all filterpot errors."""


class ParameterError(FilterPotError, ValueError):
    """A value is outside its mathematical or configured domain."""


class InsufficientDataError(FilterPotError, ValueError):
    """Too few observations to run the requested computation."""


class FormatError(FilterPotError, ValueError):
    """A persisted file is malformed or inconsistent with its manifest."""


class ShapeError(FilterPotError, ValueError):
    """An array argument has the wrong length or dimensions."""
