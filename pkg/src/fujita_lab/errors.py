"""Exception hierarchy shared by all modules of the lab."""


class LabError(Exception):
    """Base class for every error raised by fujita_lab."""


class InvalidLattice(LabError, ValueError):
    pass


class UnsupportedKind(LabError, ValueError):
    pass


class BallExceedsDomain(LabError, ValueError):
    pass


class InsufficientSamples(LabError, ValueError):
    pass


class NonMonotoneCurve(LabError, ValueError):
    pass


class CflViolation(LabError, ValueError):
    pass


class SchemeUnsupported(LabError, ValueError):
    pass


class KernelUnderResolved(LabError, ValueError):
    """The requested diffusion time is too short for the lattice spacing."""


class UnsupportedModel(LabError, ValueError):
    pass


class FitFailure(LabError, RuntimeError):
    pass


class ProfileUnfitted(LabError, ValueError):
    pass


class NegativeData(LabError, ValueError):
    pass


class BarrierBlowup(LabError, ArithmeticError):
    """The bracket inside the barrier omega(t) became non-positive."""


class NoConvergence(LabError, RuntimeError):
    pass


class InvariantViolation(LabError, AssertionError):
    """An internal invariant failed; the numerical machinery is broken.

    Used for non-monotone Picard iterates and similar loud failures.
    """


class NonMonotoneIterates(InvariantViolation):
    pass


class SandwichViolated(LabError, AssertionError):
    pass


class EnvelopeViolated(LabError, AssertionError):
    pass


class FitDegenerate(LabError, ValueError):
    pass


class NotSnapshot(LabError, ValueError):
    pass


class NotCriticalExponent(LabError, ValueError):
    pass


class ConfigError(LabError, ValueError):
    """Config file could not be parsed or failed validation."""
