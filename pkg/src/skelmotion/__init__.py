"""Skeleton-aware latent diffusion for text-to-motion generation and
attention-based zero-shot motion editing."""

__version__ = "0.1.0"

from .skeleton import SkeletonTopology, PoolingPlan, load_skeleton, counterpart_map
from .motion_io import MotionSequence, read_motion_file, write_motion_file
from .schedule import GuidanceConfig, NoiseSchedule, make_schedule
from .vae import SkeletonVAE, VAEConfig
from .denoiser import Denoiser, DenoiserConfig, generate
from .editing import EditSpec, edit_generate

__all__ = [
    "SkeletonTopology", "PoolingPlan", "load_skeleton", "counterpart_map",
    "MotionSequence", "read_motion_file", "write_motion_file",
    "GuidanceConfig", "NoiseSchedule", "make_schedule",
    "SkeletonVAE", "VAEConfig", "Denoiser", "DenoiserConfig", "generate",
    "EditSpec", "edit_generate",
]
