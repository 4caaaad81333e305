"""Exception hierarchy for mvfmr.

Everything raised on purpose derives from :class:`MvfmrError`, and most
input-shape problems also derive from ``ValueError`` so that code written
against scikit-learn conventions keeps working.
"""


class MvfmrError(Exception):
    """Base class for all errors raised by this package."""


class DomainGapError(MvfmrError, ValueError):
    """Pooled observation times leave a gap too wide to smooth across."""


class OutOfDomainError(MvfmrError, ValueError):
    """Evaluation time outside the fitted domain ``[0, T]``."""


class SingularCovarianceError(MvfmrError, ValueError):
    """A subject's conditional covariance cannot be inverted even after ridging."""


class DimensionMismatchError(MvfmrError, ValueError):
    """Array shapes that must agree do not."""


class NonConvergenceError(MvfmrError, RuntimeError):
    """Iterative optimizer stopped at its cap with the gradient above tolerance."""


class IllConditionedWeightError(MvfmrError, ValueError):
    """GMM weighting matrix is numerically singular even after ridging."""


class SeparationError(MvfmrError, RuntimeError):
    """Logistic fit diverges (perfect or quasi-perfect separation)."""


class RankDeficiencyError(MvfmrError, ValueError):
    """A regression design is rank deficient."""


class InsufficientComponentsError(MvfmrError, ValueError):
    """Requested more principal components than the FPCA fit provides."""


class InsufficientRepsError(MvfmrError, ValueError):
    """Too few bootstrap replicates requested."""


class MissingBandsError(MvfmrError, ValueError):
    """Coverage requested for curves that carry no confidence bands."""


class SingleClassError(MvfmrError, ValueError):
    """Binary labels contain only one class."""


class ConfigError(MvfmrError, ValueError):
    """Invalid run configuration; message names the offending field or line."""


class SchemaError(MvfmrError, ValueError):
    """Input file does not follow the documented column layout."""


class SubjectMismatchError(MvfmrError, ValueError):
    """Subject identifiers do not align across input files."""
