"""Exception types shared across the reconstruction pipeline."""


class MvReconError(Exception):
    """Base class for all library errors."""


class BehindCamera(MvReconError):
    """Geometry lies at non-positive depth in the camera frame."""


class UnknownClass(MvReconError):
    """No scale prior registered for a detection class."""


class DegeneratePrior(MvReconError):
    """Class scale prior has an empty or inverted diameter range."""


class InsufficientViews(MvReconError):
    """An operation needs more distinct views than are available."""


class EmptyResult(MvReconError):
    """A filter or stage rejected every candidate."""


class EmptySet(MvReconError):
    """A point-set operation received an empty set."""


class EmptyCorpus(MvReconError):
    """Shape corpus lookup on an empty corpus."""


class DegenerateGradient(MvReconError):
    """Field gradient vanished where a surface normal was needed."""


class EmptyMesh(MvReconError):
    """Isosurface extraction found no zero crossing."""


class EmptyLevels(MvReconError):
    """No pyramid level satisfies the size bounds for a detection."""


class OpenMesh(MvReconError):
    """Mesh is not watertight where a closed mesh is required."""


class Stall(MvReconError):
    """No parameter step was accepted despite repeated damping."""


class Divergence(MvReconError):
    """Optimization produced a non-finite energy."""


class FormatError(MvReconError):
    """Malformed input file."""


class ObjectNotVisible(UserWarning):
    """A scene object never appears in any rendered frame."""
