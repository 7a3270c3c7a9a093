"""Exception types raised across the package."""


class ThermoError(Exception):
    """Base class for all package errors."""


class BranchSolveFailure(ThermoError):
    """A monotone branch inverse could not be bracketed or did not converge."""


class BudgetExceeded(ThermoError):
    """A preimage tree or word enumeration would exceed the node budget."""


class NotExpanding(ThermoError):
    """A composed inverse branch fails to contract (neutral or intermittent map)."""


class UnboundedDerivative(ThermoError):
    """The derivative is unbounded, so the geometric potential is not bounded."""


class EpsilonTooLarge(ThermoError):
    """Flattening neighbourhoods around consecutive breakpoints overlap."""


class SingularBasis(ThermoError):
    """Interpolation nodes collide."""


class NotConverged(ThermoError):
    """An eigen-iteration stopped at ``max_iter`` without meeting its tolerance."""


class GapCollapsed(ThermoError):
    """The spectral gap is too small for the equilibrium state to be trusted."""


class NonSmoothPoint(ThermoError):
    """A Legendre-transform query fell inside a phase-transition candidate."""


class InsufficientRefinement(ThermoError):
    """Refinement levels disagree everywhere beyond the scheme tolerance."""


class ConfigError(ThermoError):
    """Invalid experiment configuration."""
