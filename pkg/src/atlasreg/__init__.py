"""B-spline non-rigid registration and multi-atlas label fusion for 3D volumes."""

from .errors import (
    AtlasRegError,
    DegenerateInputError,
    GeometryMismatchError,
    InvalidInputError,
    InvalidTransformError,
    NiftiFormatError,
    NumericalFailureError,
    TruncatedFileError,
    UndefinedMetricError,
    UnsupportedDatatypeError,
    UnsupportedDimensionalityError,
)
from .fusion import (
    AtlasSet,
    build_pseudo_labels,
    consistency_refine,
    ensemble_fuse,
    largest_component,
    majority_vote,
)
from .metrics import (
    EvaluationReport,
    dice,
    evaluate,
    jaccard,
    soft_dice_loss,
    surface_distances,
)
from .nifti import read_nifti, write_nifti
from .objective import (
    JointHistogram,
    ObjectiveWeights,
    bending_energy,
    build_joint_histogram,
    inconsistency_penalty,
    nmi,
    objective,
)
from .phantom import PhantomSpec, generate_phantom, random_smooth_deformation
from .registration import (
    RegistrationConfig,
    RegistrationResult,
    default_config,
    register,
    register_affine,
    register_ffd,
)
from .transforms import (
    AffineTransform,
    BSplineTransform,
    bspline_kernel,
    compose_displacement,
    deform,
    load_transform,
    save_transform,
    warp_labels,
    warp_volume,
)
from .volume import (
    LabelVolume,
    ProbabilityVolume,
    Volume,
    resample,
    sample_trilinear,
)

__version__ = "0.1.0"
