"""Zero-shot grasp prediction by asking a multimodal model to pick grid cells."""

from .depth_refine import CameraIntrinsics, GripperSpec, RefinementResult, clearance_radius_px, refine_grasp
from .evaluation import AnnotationSet, EvalReport, GraspAnnotation, evaluate_batch
from .geometry import Point, RectMask, principal_axis, rect_iou
from .io import DepthMap, load_depth, load_manifest, load_rgb
from .oracle import HttpOracle, Oracle, ReplayOracle, ScriptedOracle
from .pipeline import GraspPose, GraspResult, PipelineConfig, PipelineError, predict_grasp
from .tiling import GridSpec, tile

__version__ = "0.1.0"

__all__ = [
    "AnnotationSet",
    "CameraIntrinsics",
    "DepthMap",
    "EvalReport",
    "GraspAnnotation",
    "GraspPose",
    "GraspResult",
    "GridSpec",
    "GripperSpec",
    "HttpOracle",
    "Oracle",
    "PipelineConfig",
    "PipelineError",
    "Point",
    "RectMask",
    "RefinementResult",
    "ReplayOracle",
    "ScriptedOracle",
    "clearance_radius_px",
    "evaluate_batch",
    "load_depth",
    "load_manifest",
    "load_rgb",
    "predict_grasp",
    "principal_axis",
    "rect_iou",
    "refine_grasp",
    "tile",
]
