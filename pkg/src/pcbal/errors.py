"""Exception hierarchy shared across the package."""


class PcbalError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PcbalError, ValueError):
    """Invalid configuration value or malformed config document."""


class DatasetError(PcbalError):
    """Problem with an on-disk dataset directory or its contents."""


class ManifestInvalid(DatasetError, ValueError):
    """manifest.json is missing, malformed, or internally inconsistent."""


class BlobSizeMismatch(DatasetError, ValueError):
    """A binary blob's byte length disagrees with the manifest."""


class NormViolation(DatasetError, ValueError):
    """An embedding row is not unit-norm within tolerance."""


class IoFailure(DatasetError, OSError):
    """Underlying filesystem read/write failed."""


class ZeroVector(PcbalError, ValueError):
    """Vector has (near-)zero norm and cannot be normalized."""


class DimMismatch(PcbalError, ValueError):
    """Operands have incompatible dimensions."""


class AggregationMismatch(PcbalError, ValueError):
    """Aggregation mode is incompatible with the text bank layout."""


class IndexOutOfRange(PcbalError, IndexError):
    """Index or class label outside the valid range."""


class BudgetExceedsPool(PcbalError, ValueError):
    """Requested more selections than the candidate pool holds."""


class NotADistribution(PcbalError, ValueError):
    """Probability vector does not sum to one (or has negative mass)."""


class LengthMismatch(PcbalError, ValueError):
    """Paired sequences have different lengths."""


class EmptyInput(PcbalError, ValueError):
    """Operation requires at least one element."""


class ShapeMismatch(PcbalError, ValueError):
    """Aggregated results do not share a common shape."""
