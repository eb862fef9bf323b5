"""Exception hierarchy shared by every module."""


class PseudoglmmError(Exception):
    pass


class InvalidInputError(PseudoglmmError, ValueError):
    pass


class ConfigurationError(PseudoglmmError, ValueError):
    pass


class DegenerateScaleError(InvalidInputError):
    """A column has zero spread where a positive scale is required."""


class ClusterTooSmallError(InvalidInputError):
    pass


class InvalidStartError(PseudoglmmError, ArithmeticError):
    """Residuals are not finite at the starting point of a least-squares solve."""


class BundleValidationError(InvalidInputError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class IncompatibleProvidersError(InvalidInputError):
    pass
