"""Exception types shared across the package."""


class UFingerError(Exception):
    """Base class for all package errors."""


class ShapeError(UFingerError, ValueError):
    pass


class StateError(UFingerError, RuntimeError):
    pass


class ConfigError(UFingerError, ValueError):
    pass


class FormatError(UFingerError, ValueError):
    pass


class IntegrityError(FormatError):
    """Structurally valid header but damaged or inconsistent content."""


class DataError(UFingerError, ValueError):
    pass


class DomainError(UFingerError, ValueError):
    pass
