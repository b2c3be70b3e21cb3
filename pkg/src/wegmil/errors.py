"""Exception hierarchy shared by every module."""


class WegmilError(Exception):
    """Base class for all package errors."""


class ParseError(WegmilError):
    """Malformed input file (bad magic, truncation, bad JSON/CSV)."""


class ValidationError(WegmilError, ValueError):
    """Well-formed input that breaks a domain invariant."""


class ShapeError(WegmilError, ValueError):
    pass


class NonFiniteError(WegmilError, ArithmeticError):
    pass


class DomainError(WegmilError, ArithmeticError):
    pass


class StateError(WegmilError, RuntimeError):
    pass


class ConfigError(WegmilError, ValueError):
    pass


class DataError(WegmilError, ValueError):
    pass


class IoError(WegmilError, OSError):
    pass
