"""Symmetric probabilistic normal epipolar constraint with learnable correspondence covariances."""

from .energy import Correspondences, EnergyConfig, PnecProblem, RelativePose
from .geometry import Camera

__all__ = ["Camera", "Correspondences", "EnergyConfig", "PnecProblem", "RelativePose"]
__version__ = "0.1.0"
