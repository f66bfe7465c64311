"""Exception hierarchy shared by the pricing engines."""


class PricingError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParams(PricingError, ValueError):
    """Model or market parameters violate their invariants."""


class DomainError(PricingError, ValueError):
    """A function was evaluated outside its domain."""


class DivergentIntegral(PricingError):
    """An integral against the Levy measure does not converge."""


class FFTConfigError(PricingError):
    """The FFT grid cannot cover the requested strike span or resolution."""


class DampingError(PricingError):
    """The Carr-Madan damping exponent violates the moment condition."""


class OutOfGrid(PricingError, ValueError):
    """A strike/spot ratio lies outside a cached European curve."""


class GridTooCoarse(PricingError):
    """A finite-difference grid does not bracket the quantities of interest."""


class NumericalFailure(PricingError):
    """A linear solve or other numerical kernel failed."""


class NoExerciseRegion(PricingError):
    """No grid node satisfies the early-exercise condition."""


class DegenerateWindow(PricingError):
    """Too few nodes are available for a regression."""


class BoundaryInfeasible(PricingError, ValueError):
    """K - exp(x*) - p(exp(x*)) is not positive, so log-premium is undefined."""


class ConvergenceFailure(PricingError):
    """A quadrature did not reach its tolerance."""


class OptimizationFailure(PricingError):
    """A minimizer made no progress from an infeasible start."""


class DegenerateFit(PricingError):
    """A kernel bandwidth ended on the boundary of its search box."""
