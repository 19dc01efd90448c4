"""Exception types shared across the package."""


class MamocError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(MamocError):
    """A documented precondition on an argument was violated."""


# file formats and I/O

class BadMagic(MamocError):
    """Stream does not start with the expected format signature."""


class UnsupportedDatatype(MamocError):
    """File declares a voxel datatype this reader does not handle."""


class TruncatedStream(MamocError):
    """Stream ended before the payload promised by its header."""


class IoFailure(MamocError):
    """Underlying filesystem operation failed."""


# shapes and dimensions

class NonPositiveDim(MamocError):
    """A dimension that must be positive is zero or negative."""


class DimMismatch(MamocError):
    """Two volumes that must share dimensions do not."""


class ShapeMismatch(MamocError):
    """Array shapes are inconsistent with the operation's contract."""


# dataset splitting

class EmptyInput(MamocError):
    """An input collection that must be nonempty is empty."""


class DegenerateFraction(MamocError):
    """A fraction that must lie strictly inside (0, 1) does not."""


# block masking

class IndivisibleBlock(MamocError):
    """Block side does not divide the volume side."""


class BadProbability(MamocError):
    """Keep probability outside [0, 1]."""


# attention blocks and network assembly

class IndivisibleWindow(MamocError):
    """Window side does not divide the feature-grid side."""


class OddSide(MamocError):
    """Spatial downsampling by two requires an even side."""


class OddChannels(MamocError):
    """Channel halving requires an even channel count."""


class BadConfig(MamocError):
    """Model or run configuration violates its invariants."""


# training

class MissingCleanTarget(MamocError):
    """A fine-tuning record lacks the motion-free target scan."""


class BadEpsilon(MamocError):
    """Finite-difference step size must be strictly positive."""


# quality metrics

class EmptyMask(MamocError):
    """A region mask selects no voxels."""


class BackgroundDegenerate(MamocError):
    """Background region has zero intensity spread."""


class DegenerateContrast(MamocError):
    """Both tissue regions are constant yet their means differ."""


class VolumeTooSmall(MamocError):
    """Volume is smaller than the local comparison window."""


# synthetic data

class BadSpec(MamocError):
    """Phantom or simulation specification violates its invariants."""


class BadSeverity(MamocError):
    """Unknown motion severity tag."""


# command-line pipeline

class MissingCheckpoint(MamocError):
    """A required model checkpoint was not supplied."""


class ManifestError(MamocError):
    """Dataset manifest is missing, malformed, or inconsistent."""


class ConfigError(MamocError):
    """Run configuration file contains unknown or invalid entries."""
