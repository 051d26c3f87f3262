"""Exception types raised across the package."""


class HssmError(Exception):
    """Base class for all package errors."""


class DimensionError(HssmError, ValueError):
    pass


class DegenerateEnsembleError(HssmError, ValueError):
    """Too few members (or samples) for the requested estimator."""


class SingularMatrixError(HssmError, ArithmeticError):
    def __init__(self, name, cond=None):
        self.name = name
        self.cond = cond
        msg = f"matrix '{name}' is singular or ill-conditioned"
        if cond is not None:
            msg += f" (condition number {cond:.3g})"
        super().__init__(msg)


class ParameterDomainError(HssmError, ValueError):
    pass


class DataDomainError(HssmError, ValueError):
    pass


class ConfigurationError(HssmError, ValueError):
    pass


class ContractError(HssmError, RuntimeError):
    pass


class DivergenceError(HssmError, FloatingPointError):
    def __init__(self, message, time=None):
        self.time = time
        if time is not None:
            message = f"{message} (at time {time:g})"
        super().__init__(message)


class NumericalError(HssmError, ArithmeticError):
    def __init__(self, message, trace=None):
        self.trace = list(trace) if trace is not None else []
        super().__init__(message)


class DegeneracyError(HssmError, RuntimeError):
    """All particle weights vanished."""

    def __init__(self, message, max_log_weight=None, time=None):
        self.max_log_weight = max_log_weight
        self.time = time
        super().__init__(message)


class IngestionError(HssmError, ValueError):
    def __init__(self, message, row=None, col=None):
        self.row = row
        self.col = col
        if row is not None:
            message = f"{message} (row {row}, column {col})"
        super().__init__(message)
