"""facerig: identity-preserving facial attribute editing.

A guidance-conditioned latent diffusion model over a procedural 3D head
renderer: synthetic conditional-map rendering, a frozen latent codec,
twin UNets (denoiser + guidance), dual-stream identity context, two-stage
training, DDIM/DDPM sampling, and evaluation metrics.
"""

from .codec import CodecConfig, LatentCodec
from .config import PipelineConfig, full_profile, load_config, profile_config, toy_profile
from .diffusion import (
    LossConfig,
    NoiseSchedule,
    ddim_step,
    ddpm_step,
    make_schedule,
    q_sample,
    sample,
    training_loss,
)
from .guidance import conditioned_denoise, fuse_conditionals, init_guidance_from_diffusion
from .identity import IdentityEncoder, ProjectionConfig, ProjectionModule, SemanticEncoder
from .morphable import (
    CameraParams,
    ConditionalMaps,
    FaceParams,
    MeshModel,
    build_procedural_model,
    deform,
    render_conditionals,
    rodrigues,
)
from .pipeline import Pipeline
from .training import FreezePolicy, finetune_stage2, train_stage1
from .unet import DenoiserNet, UNetConfig, build_unet

__version__ = "0.1.0"

__all__ = [
    "CameraParams",
    "CodecConfig",
    "ConditionalMaps",
    "DenoiserNet",
    "FaceParams",
    "FreezePolicy",
    "IdentityEncoder",
    "LatentCodec",
    "LossConfig",
    "MeshModel",
    "NoiseSchedule",
    "Pipeline",
    "PipelineConfig",
    "ProjectionConfig",
    "ProjectionModule",
    "SemanticEncoder",
    "UNetConfig",
    "build_procedural_model",
    "build_unet",
    "conditioned_denoise",
    "ddim_step",
    "ddpm_step",
    "deform",
    "finetune_stage2",
    "full_profile",
    "fuse_conditionals",
    "init_guidance_from_diffusion",
    "load_config",
    "make_schedule",
    "profile_config",
    "q_sample",
    "render_conditionals",
    "rodrigues",
    "sample",
    "toy_profile",
    "train_stage1",
    "training_loss",
]
