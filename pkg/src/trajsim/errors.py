"""Exception types shared across the package."""


class DataError(Exception):
    """Input data is unusable (unreadable file, nothing survives filtering, bad shapes)."""


class DivergedError(ArithmeticError):
    """Optimization produced a non-finite value."""
