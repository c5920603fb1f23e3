"""Geometry and loss kernel for self-supervised monocular scene flow."""
from .camera import PinholeCamera, SceneFlowUVD, rigid_flow, scene_flow_3d, synthesize_scene_flow
from .config import RunConfig
from .estimators import EgoMotionAggregator, SceneFlowRefiner, TrajectoryAligner
from .evaluation import MetricReport, Trajectory, evaluate_depth, evaluate_odometry, evaluate_sceneflow
from .lie import RigidTransform
from .losses import LossWeights, MotionEstimate, SceneFrame, loss_total
from .motion_field import SE3Field, aggregate_ego_motion, aggregate_gradients
from .refine import BlockParams, OptimizerConfig, RefineResult, refine
from .warp import CropWindow

__version__ = "0.1.0"

__all__ = [
    "BlockParams",
    "CropWindow",
    "EgoMotionAggregator",
    "LossWeights",
    "MetricReport",
    "MotionEstimate",
    "OptimizerConfig",
    "PinholeCamera",
    "RefineResult",
    "RigidTransform",
    "RunConfig",
    "SE3Field",
    "SceneFlowRefiner",
    "SceneFlowUVD",
    "SceneFrame",
    "Trajectory",
    "TrajectoryAligner",
    "aggregate_ego_motion",
    "aggregate_gradients",
    "evaluate_depth",
    "evaluate_odometry",
    "evaluate_sceneflow",
    "loss_total",
    "refine",
    "rigid_flow",
    "scene_flow_3d",
    "synthesize_scene_flow",
    "__version__",
]
