class DynamicsError(Exception):
    """Base class for numerical failures raised by the dynamics services."""

    def __init__(self, message: str, *, step=None, context=None):
        self.step = step
        self.context = context
        if step is not None:
            message = f"{message} (step {step})"
        if context:
            message = f"{message} [{context}]"
        super().__init__(message)


class ContractViolation(DynamicsError, ValueError):
    """A pre-condition or dimension check failed."""
    pass


class GuardViolation(ContractViolation):
    """A problem size exceeds an exact-enumeration guard."""
    pass


class ZeroVarianceError(DynamicsError):
    """Autocorrelation requested for a constant series."""
    pass


class DegenerateStateError(DynamicsError):
    """A state has (numerically) zero norm: ansatz, projection or jump."""
    pass


class SolverError(DynamicsError):
    """The t-VMC linear system could not be solved."""
    pass


class TraceDriftError(DynamicsError):
    """The Lindblad integrator lost trace beyond tolerance."""
    pass


class JumpError(DynamicsError):
    """A variational quantum jump failed."""
    pass
