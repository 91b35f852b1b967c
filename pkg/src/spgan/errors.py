"""Exception hierarchy shared by every module."""


class SpganError(Exception):
    """Base class for all package errors."""


class DimensionError(SpganError, ValueError):
    """Operand shapes are incompatible."""


class GeometryError(DimensionError):
    """A convolution or patch geometry does not produce integer extents."""


class ParameterError(SpganError, ValueError):
    """A scalar hyperparameter is outside its admissible range."""


class ContractError(SpganError, ValueError):
    """A documented precondition of an operation was violated."""


class NumericError(SpganError, ArithmeticError):
    """A computation produced a non-finite value or failed to converge."""


class InitializationError(SpganError, ValueError):
    pass


class DegenerateStatisticsError(NumericError):
    pass


class TrainingDiagnosticError(NumericError):
    pass


class FormatError(SpganError, ValueError):
    """Malformed file contents; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(SpganError, ValueError):
    pass
