"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1,
DataError/CheckpointError exit 2, NumericsError/GraphError exit 3.
"""


class SevaeError(Exception):
    """Base class for all package errors."""


class DataError(SevaeError):
    """Malformed corpus files, bad labels/genres, infeasible sampling requests."""


class CheckpointError(SevaeError):
    """Unreadable, truncated, or mismatched checkpoint files."""


class GraphError(SevaeError):
    """Misuse of the autodiff tape (non-scalar loss, backward before forward)."""


class NumericsError(SevaeError):
    """Non-finite values in a forward op, or a failed gradient verification."""
