"""Exception hierarchy shared by every module."""


class PlugCompatError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PlugCompatError, ValueError):
    pass


class DegenerateInputError(PlugCompatError, ValueError):
    pass


class ContractError(PlugCompatError, ValueError):
    pass


class ConfigError(PlugCompatError, ValueError):
    pass


class CapacityError(PlugCompatError, ValueError):
    pass


class GenerationError(PlugCompatError, RuntimeError):
    pass


class TrainingError(PlugCompatError, RuntimeError):
    """Raised when a loss turns non-finite; carries a diagnostics dict."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class UpgradeError(PlugCompatError, RuntimeError):
    """The upgraded pair failed the zero-shot improvement gate."""

    def __init__(self, message, reports=None):
        super().__init__(message)
        self.reports = list(reports or [])


class ContainerError(PlugCompatError, IOError):
    pass
