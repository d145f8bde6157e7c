"""Exception types shared across the package."""


class MargvaeError(Exception):
    """Base class for all package-specific errors."""


class NotPositiveDefinite(MargvaeError):
    """Cholesky factorisation failed even after jitter escalation."""


class SingularMatrix(MargvaeError):
    """A triangular factor has a (numerically) zero diagonal entry."""


class NonFiniteOutput(MargvaeError):
    """A graph evaluation produced NaN or infinity."""


class NonFiniteLoss(MargvaeError):
    """Training objective became non-finite; carries the offending step index."""

    def __init__(self, step_index, message=None):
        self.step_index = step_index
        super().__init__(message or f"non-finite loss at step {step_index}")


class SizeGuard(MargvaeError):
    """A dense computation was requested above its size limit."""


class DimensionMismatch(MargvaeError):
    """Operands have incompatible shapes for the requested operation."""


class InvalidCategory(MargvaeError):
    """A categorical value is outside the declared cardinality."""


class NonPositiveVariance(MargvaeError):
    """A variance argument must be strictly positive."""


class SupportViolation(MargvaeError):
    """KL(q || p) is undefined: q puts mass where p has none."""


class EnumerationOverflow(MargvaeError):
    """Joint categorical enumeration exceeds the configured cap."""


class SchemaMismatch(MargvaeError):
    """A table does not match the schema the model was trained with."""


class MissingGroundTruth(MargvaeError):
    """A requested metric needs held-out truth that the dataset lacks."""


class ConfigError(MargvaeError):
    """Invalid experiment configuration; message names the offending key."""


class ManifestError(MargvaeError):
    """Invalid data manifest (unknown column, undeclared level, bad role)."""


class ParseError(MargvaeError):
    """Malformed data file; message carries row/column location."""


class RateError(MargvaeError):
    """Missingness rate outside [0, 1)."""


class TooFewInstances(MargvaeError):
    """Instance-level operation requested without enough (or any) instances."""
