"""Exception hierarchy shared by all atlasreg modules."""


class AtlasRegError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(AtlasRegError):
    """An argument violates a precondition (empty list, bad shape, bad value)."""


class GeometryMismatchError(AtlasRegError):
    """Two volumes that must share dims/spacing/origin/direction do not."""


class DegenerateInputError(AtlasRegError):
    """Input has no usable intensity content (constant image, empty histogram)."""


class InvalidTransformError(AtlasRegError):
    """A transform is unusable (singular affine, incompatible lattice)."""


class NumericalFailureError(AtlasRegError):
    """Optimization produced a non-finite objective value."""

    def __init__(self, message, level=None, iteration=None):
        if level is not None:
            message = f"{message} (level {level}, iteration {iteration})"
        super().__init__(message)
        self.level = level
        self.iteration = iteration


class UndefinedMetricError(AtlasRegError):
    """A metric is undefined for the given inputs (e.g. empty surface)."""


class NiftiFormatError(AtlasRegError):
    """File is not a single-file NIfTI-1 volume this package can read."""


class UnsupportedDatatypeError(NiftiFormatError):
    """NIfTI datatype code outside the supported set {2, 4, 16}."""


class UnsupportedDimensionalityError(NiftiFormatError):
    """NIfTI dim[0] is not 3."""


class TruncatedFileError(NiftiFormatError):
    """File ends before the declared voxel payload is complete."""
