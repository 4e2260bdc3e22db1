"""Exception types shared across the package."""


class AiftcError(Exception):
    """Base class for all package errors."""


class InvalidInputError(AiftcError, ValueError):
    pass


class DivergenceError(AiftcError):
    """Plant integration produced a non-finite state."""

    def __init__(self, step, message="plant state became non-finite"):
        self.step = step
        super().__init__(f"{message} at step {step}")


class ControllerDivergenceError(DivergenceError):
    def __init__(self, step):
        super().__init__(step, "controller belief became non-finite")


class IsolationEstimatorError(DivergenceError):
    def __init__(self, step, which):
        self.which = which
        super().__init__(step, f"{which} isolation estimator diverged")


class OutOfWorkspaceError(AiftcError, ValueError):
    pass


class IllConditionedKernelError(AiftcError):
    def __init__(self, min_eig):
        self.min_eig = min_eig
        super().__init__(
            f"kernel matrix is not positive definite (smallest eigenvalue ~ {min_eig:.3e})"
        )


class InsufficientCalibrationError(AiftcError):
    pass


class CalibrationMismatchError(AiftcError):
    pass


class ConfigError(AiftcError, ValueError):
    pass
