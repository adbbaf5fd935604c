"""Exception hierarchy shared by every module of the package."""


class WhittleSchedError(Exception):
    """Base class for all package errors."""


class DomainError(WhittleSchedError, ValueError):
    """An argument lies outside the domain of an operation (e.g. z > x)."""


class ValidationError(WhittleSchedError, ValueError):
    """A model object violates one of its structural invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations) or "validation failed")


class ConvergenceError(WhittleSchedError, RuntimeError):
    """An iterative scheme hit its iteration budget before meeting tolerance."""

    def __init__(self, message, last_update=float("nan"), iterations=0):
        self.last_update = last_update
        self.iterations = iterations
        super().__init__(f"{message} (last update {last_update:.3e} after {iterations} iterations)")


class DivergenceError(WhittleSchedError, RuntimeError):
    """Iterates left the region where a solution can possibly lie."""


class StructuralError(WhittleSchedError, RuntimeError):
    """A structural assumption failed (e.g. no sign change of the index gap)."""


class ConfigurationError(WhittleSchedError, ValueError):
    """A configuration file or policy setup is malformed or incomplete."""


class ContractViolation(WhittleSchedError, ValueError):
    """A caller broke an operation's precondition (e.g. infeasible action)."""
