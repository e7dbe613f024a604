"""Exception hierarchy shared by every module."""


class SplitGuardError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SplitGuardError, ValueError):
    """Invalid model, layer, noise or experiment configuration."""


class UsageError(SplitGuardError, ValueError):
    """An operation was called with arguments outside its contract."""


class TrainingError(SplitGuardError, RuntimeError):
    """Training diverged, failed to converge, or was fed invalid data."""


class FrameError(SplitGuardError, ValueError):
    """Malformed binary frame or checkpoint."""


class BadMagicError(FrameError):
    pass


class VersionMismatchError(FrameError):
    pass


class TruncatedFrameError(FrameError):
    pass


class LengthMismatchError(FrameError):
    pass
