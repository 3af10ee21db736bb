"""Exception hierarchy shared by every module."""


class CLRError(Exception):
    """Base class for all errors raised by this package"""


class ConfigurationError(CLRError, ValueError):
    """Shapes or configuration values are inconsistent"""


class UsageError(CLRError, ValueError):
    """A caller violated an operation's precondition"""


class LoadError(CLRError, OSError):
    """A dataset directory or image could not be ingested"""


class SamplingError(CLRError, ValueError):
    """An episode cannot be drawn from the given dataset"""


class TrainingError(CLRError, RuntimeError):
    """Optimization diverged or a frozen backbone was modified"""


class ReportError(CLRError, OSError):
    """A result file could not be written or read"""
