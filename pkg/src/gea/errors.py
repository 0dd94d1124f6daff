"""Exception hierarchy shared by the library and the command-line tool."""


class GEAError(Exception):
    """Base class for all errors raised by :mod:`gea`."""

    code = "E_GENERIC"


class ValidationError(GEAError, ValueError):
    """Bad arguments, schema violations, dimension mismatches."""

    code = "E_VALIDATION"


class ManifestParseError(ValidationError):
    code = "E_MANIFEST"


class FeatureLoadError(ValidationError):
    """A feature file is corrupt, truncated, non-finite or has the wrong shape."""

    code = "E_FEATURE"


class BatchError(ValidationError):
    """A similarity batch has a row or column without any positive pair."""

    code = "E_BATCH"


class NumericError(GEAError, ArithmeticError):
    """Non-finite values or zero-norm vectors where a direction is required."""

    code = "E_NUMERIC"
