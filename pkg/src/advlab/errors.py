"""Exception hierarchy shared across the package."""


class AdvlabError(Exception):
    """Base class for all errors raised by advlab."""


class ConfigError(AdvlabError, ValueError):
    """Invalid configuration value (negative epsilon, bad dropout rate, ...)."""


class DimensionError(AdvlabError, ValueError):
    """Array shapes are incompatible with an operation."""


class InvalidStateError(AdvlabError, RuntimeError):
    """Operation is not valid in the current state (e.g. batch of 1 in BN train mode)."""


class UsageError(AdvlabError, RuntimeError):
    """API misuse, such as calling backward on a non-scalar tensor."""


class NonFiniteError(AdvlabError, FloatingPointError):
    """A loss or gradient became NaN or infinite."""


# checkpoint format


class CheckpointError(AdvlabError):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class SpecMismatchError(CheckpointError):
    pass


# IDX format


class IdxFormatError(AdvlabError, ValueError):
    pass


class WrongMagicError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class DimensionOverflowError(IdxFormatError):
    pass
