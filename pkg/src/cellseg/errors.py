"""Exception types shared across the package."""


class CellSegError(Exception):
    """Base class for all package errors."""


class DimensionError(CellSegError, ValueError):
    pass


class NumericError(CellSegError, ArithmeticError):
    pass


class StatisticsError(CellSegError, ValueError):
    pass


class DomainError(CellSegError, ValueError):
    pass


class GraphError(CellSegError, RuntimeError):
    pass


class ConfigError(CellSegError, ValueError):
    pass


class FormatError(CellSegError, ValueError):
    pass


class PlanError(CellSegError, ValueError):
    pass


class MarkerError(CellSegError, ValueError):
    pass


class EmptyReferenceError(CellSegError, ValueError):
    pass


class PlacementError(CellSegError, RuntimeError):
    """Raised when the synthetic generator cannot place every requested cell."""

    def __init__(self, placed: int, requested: int):
        super().__init__(f"placed only {placed} of {requested} cells")
        self.placed = placed
        self.requested = requested
