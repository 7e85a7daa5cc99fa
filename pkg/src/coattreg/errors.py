"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class RegError(Exception):
    exit_code = 1


class UsageError(RegError):
    """Invalid call sequence or argument (exit 2)."""

    exit_code = 2


class DataError(RegError):
    """Malformed file, missing field or inconsistent data (exit 3)."""

    exit_code = 3


class ShapeError(DataError):
    """Incompatible tensor or volume extents."""


class ResourceError(DataError):
    """A configured memory/size budget would be exceeded."""


class NumericError(RegError):
    """NaN/Inf produced from finite inputs (exit 4)."""

    exit_code = 4
