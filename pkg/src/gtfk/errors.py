"""Exception types shared across the package."""


class GtfkError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(GtfkError):
    """Raised when inputs violate a documented precondition."""


class NumericalError(GtfkError):
    """Raised when a numerical routine fails to meet its contract.

    Examples: ODE step-size underflow, a quadrature that cannot reach the
    requested tolerance within its panel budget, a non-positive Gaussian
    curvature where a convergent integral is required.
    """


class ImaginaryFrequencyError(NumericalError):
    """Raised when the Riccati initial condition has a negative radicand.

    The Bernoulli-Riccati split of the phase equation requires a real
    initial slope; when the radicand goes negative the solver must fall
    back to direct second-order integration.
    """

    def __init__(self, radicand: float):
        self.radicand = radicand
        super().__init__(
            f"imaginary initial frequency: radicand {radicand:.6e} < 0; "
            "use the direct second-order phase integration instead"
        )
