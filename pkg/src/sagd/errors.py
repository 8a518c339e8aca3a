"""Exception hierarchy shared by all sagd modules."""


class SagdError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(SagdError, ValueError):
    """Inputs break a documented precondition (shape, range, emptiness)."""


class NonFiniteInput(ContractViolation):
    """A tensor argument contains NaN or infinity."""


class DegenerateInputError(SagdError, ArithmeticError):
    """Inputs sit on a singularity of the operation (zero norm, ball boundary)."""


class CapabilityError(SagdError, RuntimeError):
    """The supplied model cannot provide what the caller needs (e.g. input gradients)."""


class ConfigError(SagdError, ValueError):
    """Invalid or inconsistent configuration."""


class DivergenceError(SagdError, FloatingPointError):
    """A loss became non-finite. ``payload`` carries diagnostics."""

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = dict(payload or {})


class NumericalError(SagdError, ArithmeticError):
    """A numerical routine failed (e.g. singular covariance despite ridge)."""


class IngestionError(SagdError, IOError):
    """A dataset, bank or checkpoint file is missing or malformed."""

    def __init__(self, message, path=None):
        super().__init__(f"{message}: {path}" if path is not None else message)
        self.path = path
