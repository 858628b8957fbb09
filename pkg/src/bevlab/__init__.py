"""bevlab: a desk-scale semi-supervised BEV detection laboratory.

Everything runs on a tiny hand-rolled reverse-mode autodiff engine over
float64 numpy arrays so that every loss in the training recipe is
gradient-checked end to end: statistics-aligned camera/LiDAR fusion with
its alignment loss, a two-stage BEV detector with pseudo-label
uncertainty weighting, and an EMA teacher kept honest by importance
anchored refinement.
"""

from .errors import (
    BevLabError,
    ConfigurationError,
    DomainError,
    GenerationError,
    NumericalError,
    TrainingError,
)
from .geometry import Box, Detection, Proposal, RigidTransform, iou_bev, nms
from .gradcheck import GradCheckReport, gradient_check
from .params import Adam, ParamStore, SGD
from .tensor import Tensor
from .world import (
    DatasetSpec,
    Grid,
    Misalignment,
    Sample,
    Scene,
    SceneDataset,
    augment,
    generate_dataset,
    simulate_camera_bev,
    simulate_lidar,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "BevLabError",
    "Box",
    "ConfigurationError",
    "DatasetSpec",
    "Detection",
    "DomainError",
    "GenerationError",
    "GradCheckReport",
    "Grid",
    "Misalignment",
    "NumericalError",
    "ParamStore",
    "Proposal",
    "RigidTransform",
    "SGD",
    "Sample",
    "Scene",
    "SceneDataset",
    "Tensor",
    "TrainingError",
    "augment",
    "generate_dataset",
    "gradient_check",
    "iou_bev",
    "nms",
    "simulate_camera_bev",
    "simulate_lidar",
]
