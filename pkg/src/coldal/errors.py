"""Exception hierarchy shared by every coldal module."""


class ColdALError(Exception):
    """Base class for all coldal errors."""


class InvalidArgumentError(ColdALError, ValueError):
    pass


class BoundsError(ColdALError, IndexError):
    pass


class FormatError(ColdALError):
    """A persisted file could not be decoded."""


class MagicMismatchError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class StateError(ColdALError, RuntimeError):
    pass


class DivergenceError(ColdALError, RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""


class IncompatibilityError(ColdALError, ValueError):
    def __init__(self, names, message=None):
        self.names = list(names)
        super().__init__(message or f"incompatible parameters: {', '.join(self.names)}")


class InvalidTransitionError(ColdALError, ValueError):
    pass


class ConfigError(ColdALError, ValueError):
    def __init__(self, location, message):
        self.location = location
        super().__init__(f"{location}: {message}")


class UndefinedTestError(ColdALError, ValueError):
    pass
