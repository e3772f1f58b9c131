"""Exception types shared across the package."""


class DialogailError(Exception):
    """Base class for package errors."""


class DataError(DialogailError):
    """Corpus/file/schema problems (CLI exit code 2)."""


class TrainingError(DialogailError):
    """Optimization failure: divergence, non-finite ratios (CLI exit code 3)."""


class CheckpointError(DialogailError):
    """Unreadable, corrupt, or mismatched checkpoint container."""
