"""Depth refinement for stereo video by geometric consistency and edge-preserving losses."""

from .consistency import (
    DISPARITY_WEIGHT,
    LEFT_RIGHT,
    TEMPORAL,
    FramePairContext,
    GeometricLossReport,
    LossWeights,
    PairLossBreakdown,
    disparity_residual,
    geometric_loss,
    pair_loss,
    pair_loss_gradient,
    spatial_residual,
)
from .edges import (
    CONTRASTIVE,
    MULTISCALE,
    RATIO_BASE,
    SCALES,
    SI_BASE,
    EdgeLossConfig,
    EdgeLossReport,
    contrastive_loss,
    edge_loss,
    edge_loss_gradient,
    edge_mask,
    multiscale_gradient_loss,
    ratio_gradient,
    si_gradient,
)
from .flow import ShapeMismatchError, consistency_mask, displace, sample_bilinear
from .geometry import (
    BehindCameraError,
    CameraIntrinsics,
    DomainError,
    RigidTransform,
    StereoRig,
    depth_from_disparity,
    disparity_from_depth,
    lift,
    project,
    relative_pose,
    stereo_rig_transform,
    transform_point,
)
from .metrics import (
    DepthEvalResult,
    MetricError,
    PhotoEvalResult,
    align_scale,
    eval_depth,
    eval_sequence,
    photometric_metric,
)
from .refine import (
    FLOW_CONSISTENCY_THRESHOLD,
    LossReport,
    ParameterField,
    RefinementError,
    RefineReport,
    RefinerConfig,
    VideoBundle,
    build_pair_sets,
    gradient_check,
    refine,
    total_loss,
)

__version__ = "0.1.0"

__all__ = [
    "DISPARITY_WEIGHT", "LEFT_RIGHT", "TEMPORAL", "FramePairContext", "GeometricLossReport",
    "LossWeights", "PairLossBreakdown", "disparity_residual", "geometric_loss", "pair_loss",
    "pair_loss_gradient", "spatial_residual", "CONTRASTIVE", "MULTISCALE", "RATIO_BASE", "SCALES",
    "SI_BASE", "EdgeLossConfig", "EdgeLossReport", "contrastive_loss", "edge_loss",
    "edge_loss_gradient", "edge_mask", "multiscale_gradient_loss", "ratio_gradient", "si_gradient",
    "BehindCameraError", "CameraIntrinsics", "DomainError", "RigidTransform", "StereoRig",
    "depth_from_disparity", "disparity_from_depth", "lift", "project", "relative_pose",
    "stereo_rig_transform", "transform_point", "DepthEvalResult", "MetricError", "PhotoEvalResult",
    "align_scale", "eval_depth", "eval_sequence", "photometric_metric",
    "FLOW_CONSISTENCY_THRESHOLD", "LossReport", "ParameterField", "RefinementError", "RefineReport",
    "RefinerConfig", "VideoBundle", "build_pair_sets", "gradient_check", "refine", "total_loss",
    "ShapeMismatchError", "consistency_mask", "displace", "sample_bilinear",
]
