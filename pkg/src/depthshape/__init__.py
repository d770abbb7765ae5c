"""Depth-map geometry: unprojection, shift/focal recovery, losses and metrics."""

__version__ = "0.1.0"

from .errors import (
    DegenerateInputError,
    DepthShapeError,
    DomainError,
    EmptyInputError,
    FormatError,
    ObjectiveUndefinedError,
    RecoveryFailedError,
)
from .geometry import (
    CameraIntrinsics,
    DepthMap,
    NormalMap,
    PointCloud,
    apply_shift,
    estimate_normals,
    normalize_unit_range,
    scale_focal,
    unproject,
)
from .recovery import Perturbation, RecoveryConfig, RecoveryResult, perturb, recover, correct
from .scenes import SceneSpec, synth_scene

__all__ = [
    "__version__",
    "DegenerateInputError",
    "DepthShapeError",
    "DomainError",
    "EmptyInputError",
    "FormatError",
    "ObjectiveUndefinedError",
    "RecoveryFailedError",
    "CameraIntrinsics",
    "DepthMap",
    "NormalMap",
    "PointCloud",
    "apply_shift",
    "estimate_normals",
    "normalize_unit_range",
    "scale_focal",
    "unproject",
    "Perturbation",
    "RecoveryConfig",
    "RecoveryResult",
    "perturb",
    "recover",
    "correct",
    "SceneSpec",
    "synth_scene",
]
