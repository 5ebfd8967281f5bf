"""Exception types raised across the package."""


class CausalTrajError(Exception):
    """Base class for package errors."""


class ConfigError(CausalTrajError, ValueError):
    """Invalid or inconsistent configuration."""


class SceneParseError(CausalTrajError, ValueError):
    """A JSON-lines record could not be parsed."""


class SceneValidationError(CausalTrajError, ValueError):
    """A scene violates one of its invariants; the message names the field."""


class EncodingError(CausalTrajError, ValueError):
    """Encoder input is empty or malformed."""


class NumericalError(CausalTrajError, ArithmeticError):
    """A forward pass produced NaN or Inf."""


class UsageError(CausalTrajError, TypeError):
    """An API was called with incompatible arguments or objects."""
