"""Relightable avatar reconstruction from multi-view images of a posed parametric body."""

from .body import BodyModel, DeformedMesh, PoseParams, deform, load_body, make_capsule, pose_body
from .camera import CameraModel, look_at
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .fields import NeuralMap
from .pbr import LightProbeArray, brdf_eval, load_probes, render_pbr, shade
from .train import TrainConfig, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "BodyModel", "CameraModel", "Checkpoint", "DeformedMesh", "LightProbeArray", "NeuralMap", "PoseParams",
    "TrainConfig", "brdf_eval", "deform", "load_body", "load_checkpoint", "load_probes", "look_at",
    "make_capsule", "pose_body", "render_pbr", "save_checkpoint", "shade", "train_stage1", "train_stage2",
]
