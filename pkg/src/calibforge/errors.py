"""Exception hierarchy shared across the toolkit.

Every error carries a stable machine-readable ``code`` so the CLI can emit
parsable diagnostics without string matching.
"""


class CalibError(Exception):
    """Base class for all toolkit errors."""

    code = "ERROR"


class ValidationError(CalibError):
    """Invalid argument or configuration value."""

    code = "VALIDATION"


class NonOrthonormalError(ValidationError):
    """A matrix expected to be in SO(3) failed the orthonormality check."""

    code = "NON_ORTHONORMAL"


class DegenerateSampleError(CalibError):
    """No usable geometry survived projection (empty cloud, no overlap)."""

    code = "DEGENERATE_SAMPLE"


class VelodyneFormatError(CalibError):
    """Binary scan file length is not a whole number of point records."""

    code = "VELODYNE_FORMAT"


class CalibFileError(CalibError):
    """Problem in a KITTI-style calibration text file."""

    code = "CALIB_FILE"


class MissingCalibKeyError(CalibFileError):
    code = "MISSING_KEY"


class MalformedCalibValueError(CalibFileError):
    code = "MALFORMED_VALUE"


class ManifestVersionError(CalibError):
    """Manifest schema version is not supported by this build."""

    code = "SCHEMA_VERSION"


class ManifestFormatError(CalibError):
    """Manifest JSON is structurally invalid."""

    code = "MANIFEST_FORMAT"


class UnknownSampleIdError(CalibError):
    """A result references a sample id absent from the manifest."""

    code = "ID_MISMATCH"


class PathNotFoundError(CalibError):
    """An input path is missing or an output directory does not exist."""

    code = "PATH_NOT_FOUND"


class ImageDecodeError(CalibError):
    """Image file could not be decoded."""

    code = "IMAGE_DECODE"


class DimensionMismatchError(CalibError):
    """Image and depth map dimensions do not agree."""

    code = "DIMENSION_MISMATCH"
