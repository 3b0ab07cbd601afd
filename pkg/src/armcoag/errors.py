"""Error taxonomy shared by every module.

Two broad families matter to callers: configuration problems (bad inputs,
wrong normalization) and numerical-domain problems (past the critical time,
truncation leak too large, step underflow). The CLI maps the first family to
exit code 2 and the second to exit code 1.
"""


class ArmcoagError(Exception):
    """Base class for all library errors."""


class ValidationError(ArmcoagError, ValueError):
    """Malformed input: negative weights, empty measures, bad parameters."""


class NormalizationError(ValidationError):
    """A measure does not satisfy the normalization an operation requires.

    Raised e.g. when an oriented model is built from a measure whose total
    mass is not 1, or a symmetric model from a measure whose mean is not 1.
    Use normalize_model() to rescale and obtain the time-dilation factor.
    """


class DomainError(ArmcoagError, ValueError):
    """Evaluation requested outside the domain where a formula is valid."""


class UnsupportedRegimeError(DomainError):
    """The requested quantity has no known formula in this regime.

    Examples: the long-time oriented limit when the arm mean is >= the
    particle mass, or the zero-arm limit table when gelation occurs.
    """


class SolverFailureError(ArmcoagError, RuntimeError):
    """An iterative solver failed to meet its advertised residual."""


class LeakToleranceError(ArmcoagError, RuntimeError):
    """Truncation overflow exceeded the configured budget during integration."""

    def __init__(self, message, time=None, leak=None):
        super().__init__(message)
        self.time = time
        self.leak = leak


class BlowUpError(ArmcoagError, RuntimeError):
    """Step size underflowed, typically approaching the gelation time."""

    def __init__(self, message, last_time=None):
        super().__init__(message)
        self.last_time = last_time
