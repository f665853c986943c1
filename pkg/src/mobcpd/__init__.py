"""Multi-organ Bayesian coherent point drift.

Deformable registration of labeled point clouds with per-organ elasticity,
inter-organ motion coupling and segmentation-error-aware correspondences.
"""

from .core import LabeledCloud, Landmarks, SimilarityTransform, bounding_box
from .interpolation import RegistrationModel, interpolate, warp_points_file
from .kernel import OrganModel, build_gram, low_rank_factor
from .labels import ConfusionModel, build_label_transition
from .registration import (Config, RegistrationDiverged, RegistrationResult, configure_mode,
                           register)

__version__ = "0.1.0"

__all__ = [
    "Config",
    "ConfusionModel",
    "LabeledCloud",
    "Landmarks",
    "OrganModel",
    "RegistrationDiverged",
    "RegistrationModel",
    "RegistrationResult",
    "SimilarityTransform",
    "bounding_box",
    "build_gram",
    "build_label_transition",
    "configure_mode",
    "interpolate",
    "low_rank_factor",
    "register",
    "warp_points_file",
]
