"""Shared exception types.

Every shape-sensitive operation raises :class:`ShapeError` with a message
that names the offending fields, so CLI error reporting can stay uniform.
"""


class ShapeError(ValueError):
    """Operands have incompatible extents; the message names both sides."""


class UsageError(ValueError):
    """An argument violates a documented precondition (not a shape issue)."""


class FileFormatError(ValueError):
    """A file payload does not match its declared on-disk format."""
