"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not fit the operation."""


class SingularMatrixError(ArithmeticError):
    def __init__(self, pivot):
        self.pivot = pivot
        super().__init__(f"matrix is singular to working precision at pivot {pivot}")


class StateError(RuntimeError):
    """An operation was called on an object in the wrong state."""


class ProtocolError(RuntimeError):
    """A collective was entered inconsistently by the participating ranks."""

    def __init__(self, message, rank=None):
        self.rank = rank
        super().__init__(message if rank is None else f"rank {rank}: {message}")


class ConsistencyError(RuntimeError):
    """Worker replicas diverged."""


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class FormatError(ValueError):
    """Malformed dataset file."""
