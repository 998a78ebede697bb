"""Exception types shared across the solver stack."""


class SsmfitError(Exception):
    """Base class for all solver errors raised by this package."""


class SingularSystem(SsmfitError):
    """A block pivot in a structured factorization is numerically singular."""


class SchurSingular(SsmfitError):
    """The measurement-space Schur complement of the KKT matrix is singular.

    Signals that the saddle system is not invertible at the current point,
    e.g. because the null-space compatibility condition between the two
    covariances fails.
    """


class SingularCovariance(SsmfitError):
    """A covariance factor block is rank deficient where invertibility is required."""


class DualSingular(SsmfitError):
    """The dual normal matrix of the least-squares saddle problem is singular."""


class HessianSingular(SsmfitError):
    """The block-tridiagonal state Hessian could not be factored."""


class MaxIterations(SsmfitError):
    """An iterative solver exhausted its iteration budget."""


class LineSearchFailure(SsmfitError):
    """A line search failed to produce sufficient decrease."""


class OracleFailure(SsmfitError):
    """A value-function oracle call failed inside an outer optimizer."""


class ConfigError(SsmfitError):
    """An experiment configuration or problem file is invalid."""
