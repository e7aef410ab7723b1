"""Exception types shared across the package."""


class NumericFailure(RuntimeError):
    """A numerical routine (factorization, SVD, ...) failed or lost accuracy."""


class DegenerateInput(ValueError):
    """Input is degenerate for the requested operation (zero matrix, zero crossing, ...)."""


class EigenvalueHit(NumericFailure):
    """The discrete operator is singular: 0 is a Dirichlet eigenvalue of the system."""


class DegenerateCertificate(RuntimeError):
    """The tangent interpolation system is rank deficient.

    Carries the smallest singular value of the restricted measurement map.
    """

    def __init__(self, message, sigma_min=0.0):
        super().__init__(message)
        self.sigma_min = sigma_min


class ConfigError(ValueError):
    """Experiment configuration could not be parsed or validated."""
