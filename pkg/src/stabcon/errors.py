"""Exception hierarchy.  Every error raised on purpose derives from StabconError."""


class StabconError(Exception):
    pass


class ModelError(StabconError, ValueError):
    """Invalid network data (unknown bus, non-positive reactance, ...)."""


class StructuralError(ModelError):
    """Branch graph is disconnected."""


class DegenerateBranchError(ModelError):
    pass


class DomainError(StabconError, ValueError):
    pass


class SingularNetworkError(StabconError, ArithmeticError):
    """No grounded source online; the admittance matrix cannot be inverted."""


class ReductionError(StabconError, ArithmeticError):
    pass


class MetricNotApplicable(StabconError):
    """The metric has nothing to measure in this scenario (e.g. no online GFL)."""


class SingularFaultError(StabconError, ArithmeticError):
    pass


class DivergenceError(StabconError, ArithmeticError):
    def __init__(self, message: str, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class ParameterError(StabconError, ValueError):
    pass


class BandTooTightError(StabconError):
    """Penalty escalation hit its cap with Omega1/Omega3 still misclassified."""


class RepairError(StabconError):
    """Shifting the cone offset to reject Omega1 also rejects part of Omega3."""


class UnfittableMetricError(StabconError):
    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConservativenessError(StabconError, AssertionError):
    pass


class SchemaError(StabconError, ValueError):
    pass
