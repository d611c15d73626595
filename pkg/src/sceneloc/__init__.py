"""Camera localization from RGB images: scene-coordinate regression forests,
their equivalent two-hidden-layer network ensembles, robust geometric-median
averaging, and RANSAC pose recovery."""

from .config import ExperimentConfig, apply_overrides, load_config, save_config
from .errors import EXIT_CODES, SceneLocError
from .features import FeatureBank, feature_matrix_for_pixels
from .forest import Forest, ForestConfig, load_forest, save_forest, train_forest
from .forestnet import (
    ForestNet,
    forward_ensemble,
    load_forestnet,
    map_back,
    map_forest_to_net,
    save_forestnet,
    train_forestnet,
)
from .metrics import aggregate, coord_metrics, pose_metrics
from .pose_ransac import RansacConfig, localize_frame, ransac_pose
from .robust_average import GMConfig, apply_pgm, gm_forward
from .scene_data import (
    CameraIntrinsics,
    CameraPose,
    SyntheticScene,
    load_dataset,
    render_synthetic,
    room_trajectory,
    save_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "CameraPose",
    "EXIT_CODES",
    "ExperimentConfig",
    "FeatureBank",
    "Forest",
    "ForestConfig",
    "ForestNet",
    "GMConfig",
    "RansacConfig",
    "SceneLocError",
    "SyntheticScene",
    "aggregate",
    "apply_overrides",
    "apply_pgm",
    "coord_metrics",
    "feature_matrix_for_pixels",
    "forward_ensemble",
    "gm_forward",
    "load_config",
    "load_dataset",
    "load_forest",
    "load_forestnet",
    "localize_frame",
    "map_back",
    "map_forest_to_net",
    "pose_metrics",
    "ransac_pose",
    "render_synthetic",
    "room_trajectory",
    "save_config",
    "save_dataset",
    "save_forest",
    "save_forestnet",
    "train_forest",
    "train_forestnet",
    "__version__",
]
