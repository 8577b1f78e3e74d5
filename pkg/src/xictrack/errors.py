"""Exception types shared across the toolkit."""


class XicError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(XicError):
    """An argument violates a documented precondition."""


class InvalidConfigError(XicError):
    """A configuration value or file is unusable."""


class InvalidStateError(XicError):
    """An operation was called in the wrong order (e.g. missing cache)."""


class FormatError(XicError):
    """An on-disk file does not follow the expected layout."""


class DegenerateBatchError(XicError):
    """Every sample in a mini-batch was dropped by the weighting masks."""


class TrainingDivergedError(XicError):
    """Non-finite values appeared during optimization."""
