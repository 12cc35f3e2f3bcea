"""Exception hierarchy shared by every module."""


class StagePlanError(Exception):
    """Base class for all package errors."""


class ConfigError(StagePlanError, ValueError):
    """Malformed function descriptor, study spec, or mismatched hp sets."""


class BoundsError(StagePlanError, IndexError):
    """A step argument lies outside the valid range."""


class IntegrityError(StagePlanError):
    """Plan or scheduler state violates an internal invariant."""


class ProtocolError(StagePlanError):
    """A tuner received results that break its wait contract."""


class QueryError(StagePlanError, KeyError):
    """Unknown study or node id in a read-only query."""


class ComparisonError(StagePlanError):
    """Two traces or summaries cannot be compared."""
