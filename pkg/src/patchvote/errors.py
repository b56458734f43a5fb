"""Exception types shared across the package."""


class PatchVoteError(Exception):
    """Base class for all errors raised by patchvote."""


class InvalidRotation(PatchVoteError):
    """Matrix is not a proper rotation (non-finite, singular, or a reflection)."""


class AngleNearPi(PatchVoteError):
    """Rotation angle too close to pi for a stable axis-angle decomposition."""


class DegenerateFrame(PatchVoteError):
    """Covariance eigenvalues too close: the PCA frame is rotationally ambiguous."""


class CountExceedsCloud(PatchVoteError):
    """Requested more samples than the cloud has points."""


class DimensionMismatch(PatchVoteError):
    """Array dimensions do not agree with the configured sizes."""


class EmptySegment(PatchVoteError):
    """Segmentation produced no usable points for the requested class."""


class ParseError(PatchVoteError):
    """Malformed input file; message carries a line or byte offset."""


class UnsupportedProperty(ParseError):
    """File uses a feature this reader does not handle (e.g. list properties)."""


class TooFewPoints(PatchVoteError):
    """Patch contains too few points to be usable."""


class ModelNotStandardized(PatchVoteError):
    """Model cloud is not expressed in its own PCA frame (the OCF)."""


class LengthMismatch(PatchVoteError):
    """Feature list and weight list lengths differ."""


class UnknownModel(PatchVoteError):
    """No regressor registered for the requested model id."""


class EmptyDatabase(PatchVoteError):
    """Patch database holds no records."""


class DatabaseTooSmall(PatchVoteError):
    """Too few records to train on (need >= 10 * batch_size)."""


class NoClusterSurvives(PatchVoteError):
    """Vote aggregation left no cluster after merging and pruning."""


class NoCorrespondences(PatchVoteError):
    """ICP found no point pairs inside the rejection radius."""


class ConfigError(PatchVoteError):
    """Unknown key or out-of-range value in a run configuration."""


class SegmentTooSmallWarning(UserWarning):
    """Fewer usable patch centers than requested; the result list is shorter."""
