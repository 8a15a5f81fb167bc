"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4. Structural problems (shape/layout violations inside the
network) raise ShapeError, which is a programming/input contract failure
rather than a user-recoverable condition.
"""


class MphmError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MphmError):
    """Invalid or inconsistent configuration (bad value, bad combination)."""


class ShapeError(MphmError):
    """Structural violation: mismatched dims, bad layout tags, indivisible sizes."""


class DataError(MphmError):
    """Dataset / file-level problems: orphan pairs, unreadable images, bad archives."""


class NumericError(MphmError):
    """Non-finite values encountered where the pipeline must fail fast."""


class CheckpointError(MphmError):
    """Corrupt checkpoint file or checkpoint/config mismatch."""
