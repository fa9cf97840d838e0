"""Exception types raised across the library."""


class IqcSynError(Exception):
    """Base class for all library-specific errors."""


class DimensionError(IqcSynError, ValueError):
    """Matrix or signal dimensions are inconsistent."""


class WellPosednessError(IqcSynError):
    """A feedback loop matrix (I - D1*D2) is singular within tolerance."""


class InstabilityError(IqcSynError):
    """An operation requiring a Schur-stable matrix received an unstable one."""


class SpectrumOnCircleError(IqcSynError):
    """The Riccati pencil has a generalized eigenvalue on the unit circle."""


class SubspaceNotDisconjugateError(IqcSynError):
    """The deflating subspace does not yield a symmetric Riccati solution."""


class SingularInnerTermError(IqcSynError):
    """B'ZB + R of a Riccati solution is singular or too ill-conditioned."""


class FrequencyIdentityViolatedError(IqcSynError):
    """A required frequency-domain identity fails on the unit-circle grid."""


class AssumptionViolatedError(IqcSynError):
    """The multiplier fails the frequency-domain factorization conditions."""


class CertificateResidualError(IqcSynError):
    """The factorization certificate residual exceeds tolerance."""


class RankDeficiencyError(IqcSynError):
    """No full-row-rank intertwining map exists within tolerance."""


class SingularD22Error(IqcSynError):
    """The D22 block of the factorized filter is too ill-conditioned to invert."""


class NotPositiveDefiniteError(IqcSynError):
    """A matrix required to be positive definite is not."""


class FeasibilitySeedFailedError(IqcSynError):
    """The warm-start epsilon search exhausted without a feasible seed."""


class SingularIXYError(IqcSynError):
    """I - XY is numerically singular during controller reconstruction."""


class BlockNotPositiveError(IqcSynError):
    """A block required positive definite in a certificate recovery is not."""


class InfeasibleError(IqcSynError):
    """The SDP reports (primal) infeasibility."""


class SolverInaccurateError(IqcSynError):
    """The SDP solver terminated without reaching the requested accuracy."""


class BackendFailureError(IqcSynError):
    """The conic solver backend raised or returned an unusable status."""


class NotRobustlyStabilizableError(IqcSynError):
    """The uncertainty homotopy stalled below tau = 1."""


class ConfigError(IqcSynError, ValueError):
    """A problem configuration is invalid or unsupported."""
