"""Exception hierarchy shared across the package."""


class PohedgeError(Exception):
    pass


class ModelValidationError(PohedgeError):
    """Raised for specs that are malformed or fail a standing assumption."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class AdmissibilityError(PohedgeError):
    """The minimal martingale measure is not defined for this spec."""


class StepSizeError(PohedgeError):
    def __init__(self, message, required_steps):
        super().__init__(message)
        self.required_steps = required_steps


class ObservationError(PohedgeError):
    """Observation inconsistent with model."""


class ContractError(PohedgeError):
    pass


class TreeSizeError(PohedgeError):
    def __init__(self, message, estimated_nodes):
        super().__init__(message)
        self.estimated_nodes = estimated_nodes


class GridMismatchError(PohedgeError):
    pass


class SingularityError(PohedgeError):
    pass
