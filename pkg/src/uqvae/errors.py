"""Exception hierarchy shared across the package.

Numerical failures carry enough context in the message to diagnose which
quantity went bad; callers that can recover catch the specific subclass.
"""


class UqvaeError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(UqvaeError):
    """Operand shapes are inconsistent."""


class NotPositiveDefinite(UqvaeError):
    """A matrix required to be SPD failed its pivot test."""


class NoConvergence(UqvaeError):
    """An iterative solver hit its iteration cap."""


class NonPositiveSpectrum(UqvaeError):
    """A generalized eigenproblem produced non-positive eigenvalues."""


class NonFiniteActivation(UqvaeError):
    """A network layer produced NaN or Inf."""


class TapeMismatch(UqvaeError):
    """Backward pass received a tape from a different forward pass."""


class DegenerateSpread(UqvaeError):
    """Normalization requested on data with zero spread."""


class ZeroSignal(UqvaeError):
    """Noise construction hit an all-zero observation component."""


class ZeroReference(UqvaeError):
    """Relative error requested against an all-zero reference."""


class ForwardFailure(UqvaeError):
    """A forward model evaluation failed (overflow, solver breakdown...)."""


class SolverFailure(ForwardFailure):
    """A linear solve inside a forward model failed."""


class SingularC(UqvaeError):
    """A Cholesky-factor argument is singular."""


class SingularGamma(UqvaeError):
    """A covariance argument is singular."""


class DivergenceDetected(UqvaeError):
    """Training loss stayed non-finite for several consecutive steps."""


class InsufficientSamples(UqvaeError):
    """Too few samples for the requested statistic."""


class BoundaryPoint(UqvaeError):
    """A uniform point on the boundary of (0,1)^d cannot be transformed."""


class DimensionUnsupported(UqvaeError):
    """Sobol dimension exceeds the direction-number table capacity."""


class DegenerateWeights(UqvaeError):
    """Importance weights collapsed (effective sample size < 2)."""


class ZeroVariance(UqvaeError):
    """A sensitivity index is undefined because the output has no variance."""


class NonFiniteState(UqvaeError):
    """ODE state left the finite range."""


class IntegratorBlowup(NonFiniteState):
    """Time integration produced non-finite state."""


class EmptyTrajectory(UqvaeError):
    """Output extraction requested on an empty trajectory."""


class MissingArtifact(UqvaeError):
    """A pipeline stage needs a file another stage has not produced."""


class ConfigError(UqvaeError):
    """Run configuration is invalid."""
