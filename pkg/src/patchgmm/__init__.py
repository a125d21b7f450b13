"""Location-wise low-rank Gaussian mixture learning and imputation for
sparsely sampled 3D volumes.

The package learns, for every subvolume of a volume grid, a mixture whose
components have covariance W W^T + sigma2 I, from patches that are only
partially observed.  Missing voxels are then imputed by conditional means
(or posterior samples) and overlapping patches are averaged back into a
volume.  See README.md for the pipeline walkthrough.
"""

from ._accel import BACKEND
from .degrade import (
    axial_slice_mask,
    gaussian_kernel,
    random_mask,
    rotated_plane_mask,
    thickness_blur,
)
from .ecm import (
    EcmStats,
    FullCovModel,
    ecm_e_step,
    ecm_fit,
    ecm_m_step,
    ecm_observed_loglik,
    init_fullcov,
    low_rank_project,
)
from .em import TrainConfig, e_step, fit, init_from_interpolation, m_step
from .errors import (
    ConfigError,
    CoverageError,
    FormatError,
    InfinitePsnrError,
    InitializationError,
    ManifestError,
    NumericalError,
    ParameterError,
    PatchGmmError,
    ShapeError,
    ValidationError,
)
from .impute import (
    impute_patch_map,
    impute_patch_sample,
    restore_volume,
    sample_reconstruction,
)
from .metrics import (
    baseline_linear,
    baseline_nearest,
    improvement_over_baseline,
    mse,
    psnr,
    write_report,
)
from .model import (
    LatentStats,
    MixtureModel,
    load_manifest,
    load_model,
    observed_loglik,
    latent_posterior,
    responsibilities,
    save_manifest,
    save_model,
)
from .patches import (
    PackedPatches,
    PatchSample,
    SubvolumeGrid,
    extract_patches,
    pack_patches,
    stitch,
)
from .synth import generate_collection
from .volume import (
    ObservationMask,
    Volume,
    load_mask,
    load_volume,
    mask_from_weights,
    save_mask,
    save_volume,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "CoverageError",
    "EcmStats",
    "FormatError",
    "FullCovModel",
    "InfinitePsnrError",
    "InitializationError",
    "LatentStats",
    "ManifestError",
    "MixtureModel",
    "NumericalError",
    "ObservationMask",
    "PackedPatches",
    "ParameterError",
    "PatchGmmError",
    "PatchSample",
    "ShapeError",
    "SubvolumeGrid",
    "TrainConfig",
    "ValidationError",
    "Volume",
    "axial_slice_mask",
    "baseline_linear",
    "baseline_nearest",
    "e_step",
    "ecm_e_step",
    "ecm_fit",
    "ecm_m_step",
    "ecm_observed_loglik",
    "extract_patches",
    "fit",
    "gaussian_kernel",
    "generate_collection",
    "improvement_over_baseline",
    "impute_patch_map",
    "impute_patch_sample",
    "init_from_interpolation",
    "init_fullcov",
    "latent_posterior",
    "load_manifest",
    "load_mask",
    "load_model",
    "load_volume",
    "low_rank_project",
    "m_step",
    "mask_from_weights",
    "mse",
    "observed_loglik",
    "pack_patches",
    "psnr",
    "random_mask",
    "responsibilities",
    "restore_volume",
    "rotated_plane_mask",
    "sample_reconstruction",
    "save_manifest",
    "save_mask",
    "save_model",
    "save_volume",
    "stitch",
    "thickness_blur",
    "write_report",
]
