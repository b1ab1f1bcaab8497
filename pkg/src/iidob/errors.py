"""Exception hierarchy shared by all modules."""


class IidobError(Exception):
    """Base class for every error raised by this package."""


class ContractError(IidobError, ValueError):
    """Dimension or precondition mismatch on a public call."""


class StepError(IidobError, ArithmeticError):
    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class QuadratureError(IidobError, ArithmeticError):
    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class DifferentiationError(IidobError, ArithmeticError):
    pass


class ModelError(IidobError):
    pass


class ConfigError(IidobError, ValueError):
    """A configuration violates one of the design inequalities.

    ``violations`` holds the names of the inequalities that failed.
    """

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class InfeasibleQPError(IidobError):
    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate


class ControllerError(IidobError):
    pass


class SimulationError(IidobError):
    """Runtime failure inside the closed loop; ``step`` is the failing index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
