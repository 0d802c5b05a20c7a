"""Exception hierarchy shared across the package.

DataError maps to CLI exit code 2 (bad input), NumericalError to exit
code 3 (a fit or factorization failed).
"""


class CpkernError(Exception):
    """Base class for all package errors."""


class DataError(CpkernError, ValueError):
    """Invalid input: schema, referential integrity, or domain violations."""


class NumericalError(CpkernError, RuntimeError):
    """A numerical procedure failed (factorization, degenerate system)."""


class NoOverlapError(NumericalError):
    """No plaque-cell pair falls inside any kernel support."""


class EmptyStratumError(DataError):
    """A (cell type, time) stratum has no positive-weight triples."""
