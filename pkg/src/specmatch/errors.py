"""Exception types shared across the toolkit."""


class SpecmatchError(Exception):
    """Base class for every error raised by this package."""


class ParseError(SpecmatchError):
    """A mesh file could not be parsed under its declared format."""


class FormatError(SpecmatchError):
    """A binary artifact has a bad magic, truncated payload, or wrong layout."""


class VersionError(FormatError):
    """A binary artifact declares an unsupported format version."""


class DegenerateMesh(SpecmatchError):
    """Mesh geometry is numerically unusable (zero-area face, isolated vertex)."""


class IndexOutOfRange(SpecmatchError):
    """A face or correspondence refers to a vertex that does not exist."""


class DisconnectedMesh(SpecmatchError):
    """A vertex is unreachable over the edge graph."""


class ShapeMismatch(SpecmatchError):
    """Array dimensions do not chain."""


class KTooLarge(SpecmatchError):
    """Requested spectral order exceeds what the mesh or basis provides."""


class ConvergenceFailure(SpecmatchError):
    """The eigensolver did not produce a usable spectrum."""


class SingularSystem(SpecmatchError):
    """A linear solve hit a singular matrix with the ridge disabled."""


class NonFinite(SpecmatchError):
    """A NaN or infinity appeared where finite values are required."""


class EmptyDataset(SpecmatchError):
    """An operation needs at least one training sample."""


class SigmaOutOfRange(SpecmatchError):
    """A noise level falls outside the schedule's [sigma_min, sigma_max]."""


class DistortionBoundExceeded(SpecmatchError):
    """The deformation sampler kept violating the edge-distortion bound."""


class ConfigError(SpecmatchError):
    """A run configuration contains unknown keys or unparsable values."""
