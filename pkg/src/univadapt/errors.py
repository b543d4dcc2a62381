"""Exception hierarchy shared by every module."""


class UnivAdaptError(Exception):
    pass


class ConfigurationError(UnivAdaptError, ValueError):
    """Bad dimensions, missing callables, or an invalid experiment config."""


class NumericError(UnivAdaptError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable number."""


class InvariantViolation(UnivAdaptError):
    pass


class DegeneracyError(UnivAdaptError):
    """Rank-deficient input matrix or an indefinite metric."""


class InfeasibleError(UnivAdaptError):
    """The min-norm decrement constraint cannot be met at this state."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class PreconditionError(UnivAdaptError):
    pass


class SynthesisError(UnivAdaptError):
    def __init__(self, message, worst=None):
        super().__init__(message)
        self.worst = worst


class DivergenceError(UnivAdaptError):
    def __init__(self, message, t=None, state_norm=None):
        super().__init__(message)
        self.t = t
        self.state_norm = state_norm
