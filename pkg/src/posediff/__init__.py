"""Pose- and appearance-conditioned diffusion on synthetic sprite people."""

from .data import PairDataset, SceneSpec, render_person, sample_scene
from .network import ModelConfig, PoseTextureUNet
from .sampler import EditSpec, GuidanceConfig, ddim_sample, edit, interpolate, sample
from .schedule import NoiseSchedule, make_linear_schedule
from .train import TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "EditSpec",
    "GuidanceConfig",
    "ModelConfig",
    "NoiseSchedule",
    "PairDataset",
    "PoseTextureUNet",
    "SceneSpec",
    "TrainConfig",
    "ddim_sample",
    "edit",
    "fit",
    "interpolate",
    "load_checkpoint",
    "make_linear_schedule",
    "render_person",
    "sample",
    "sample_scene",
    "save_checkpoint",
]
