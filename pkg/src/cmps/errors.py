"""Exception hierarchy shared across the package.

Exit-code mapping used by the command line tool:

* usage errors            -> 2
* data/domain errors      -> 3  (:class:`DataError` and subclasses)
* numeric failures        -> 4  (:class:`NumericError` and subclasses)
"""


class CmpsError(Exception):
    """Base class for all package errors."""


class DataError(CmpsError):
    """Malformed input data: schema, parse, or domain violations."""

    exit_code = 3


class DomainError(DataError):
    """A value lies outside the domain its feature map is defined on."""


class SchemaError(DataError):
    """A dataset or model file does not match the expected layout."""


class NumericError(CmpsError):
    """A numeric routine failed to converge or produced invalid output."""

    exit_code = 4


class RankDeficiencyError(NumericError):
    """A matrix expected to have full numerical rank does not.

    Carries the offending eigenvalue in ``args`` so callers can report it.
    """


class DegenerateStateError(NumericError):
    """A conditional state has non-positive trace; sampling cannot proceed."""


class CanonicalFormError(CmpsError):
    """An operation required a canonical model with a particular center."""
