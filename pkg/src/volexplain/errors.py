"""Exception types raised across the package.

Every exception derives from :class:`VolexplainError` so the CLI can turn
expected failures into one-line diagnostics. Most also derive from the
closest builtin so callers can catch ``ValueError`` and friends.
"""


class VolexplainError(Exception):
    """Base class for all expected failures."""


class ShapeError(VolexplainError, ValueError):
    """Tensor extents are invalid or inconsistent."""


class NonFiniteError(VolexplainError, ValueError):
    """A NaN or infinity entered or left an operation."""


class LabelError(VolexplainError, ValueError):
    """A class label or class index is out of range."""


class ArgmaxError(VolexplainError, IndexError):
    """A pooling argmax map references positions outside the input."""


class SpecError(VolexplainError, ValueError):
    """A network specification is malformed or fails shape inference."""


class WeightFileError(VolexplainError, ValueError):
    """A weight file cannot be decoded."""


class MagicError(WeightFileError):
    pass


class VersionError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class SpecMismatchError(WeightFileError):
    pass


class VolumeFormatError(VolexplainError, ValueError):
    """A volume file is malformed or uses an unsupported feature."""


class UnsupportedDatatypeError(VolumeFormatError):
    pass


class TrainingError(VolexplainError, RuntimeError):
    pass


class AtlasError(VolexplainError, ValueError):
    pass


class ManifestError(VolexplainError, ValueError):
    pass
