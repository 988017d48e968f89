"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems are usage
errors (2), data problems are data errors (3), and anything numerical
that should not happen on valid input is a numeric failure (4).
"""


class BasisSelectError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BasisSelectError):
    """Invalid configuration: bad basis sizes, chain specs, prior settings."""


class DataError(BasisSelectError):
    """Problems with user-supplied data."""


class ParseError(DataError):
    """Malformed input file; message names the offending line."""


class DegeneracyError(DataError):
    """Degenerate data, e.g. duplicate evaluation points without jitter."""


class DomainError(BasisSelectError):
    """A value lies outside the mathematically valid domain."""


class ShapeError(BasisSelectError):
    """Inconsistent array dimensions."""


class NumericError(BasisSelectError):
    """Numerical failure: factorization breakdown, non-finite objective."""
