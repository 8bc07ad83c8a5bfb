"""Resolved configuration for the whole pipeline, plus named size profiles.

`toy` is the desk-scale profile every test and the acceptance experiment
run on; `full` mirrors the reference production-scale values (it exists as
a preset and is far too large to train here).  A YAML/JSON config file
selects a profile and overrides individual snake_case keys.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .codec import CodecConfig
from .diffusion import LossConfig
from .identity import ProjectionConfig
from .optim import OptimizerConfig
from .unet import UNetConfig

PROFILES = ("toy", "full")
_PROFILE_ALIASES = {"paper": "full"}


@dataclass
class RenderConfig:
    resolution: int = 32
    v_target: int = 162
    n_shape: int = 8
    n_expr: int = 4
    n_alb: int = 4
    n_joint: int = 1
    model_seed: int = 7


@dataclass
class SamplingRanges:
    """Per-coefficient sampling intervals for dataset synthesis."""

    shape_scale: float = 1.8
    expr_scale: float = 1.0
    albedo_scale: float = 2.5
    rot_range: float = 0.3  # radians per global-rotation axis
    joint_range: float = 0.3
    light_ambient: tuple[float, float] = (0.9, 1.35)
    light_band: float = 0.28
    light_chroma: float = 0.04
    cam_scale_jitter: float = 0.1
    cam_shift: float = 0.8  # template length units

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            vals = v if isinstance(v, (tuple, list)) else (v,)
            for x in vals:
                if not (isinstance(x, (int, float)) and abs(x) < 1e12):
                    raise ValueError(f"range field {f.name} must be finite, got {v!r}")
        if self.light_ambient[0] > self.light_ambient[1]:
            raise ValueError("light_ambient interval is inverted")


@dataclass
class DatasetConfig:
    n_identities: int = 64
    variations_per_identity: int = 8
    master_seed: int = 2024
    ranges: SamplingRanges = field(default_factory=SamplingRanges)
    store_float_maps: bool = False

    def validate(self) -> None:
        if self.n_identities < 1 or self.variations_per_identity < 1:
            raise ValueError("dataset counts must be >= 1")
        self.ranges.validate()


@dataclass
class ScheduleConfig:
    beta_start: float = 0.00085
    beta_end: float = 0.012
    num_timesteps: int = 1000
    kind: str = "scaled_linear"


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 4
    seed: int = 1234
    learning_rate: float | None = None  # None -> optimizer default


@dataclass
class FinetuneConfig:
    steps: int = 50
    copies: int = 8
    seed: int = 99
    learning_rate: float | None = None


@dataclass
class PipelineConfig:
    profile: str = "toy"
    render: RenderConfig = field(default_factory=RenderConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    unet: UNetConfig = field(default_factory=lambda: UNetConfig(in_channels=12, out_channels=12))
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    context_mode: str = "both"
    guidance_time_conditioning: bool = True
    unet_seed: int = 31
    projection_seed: int = 41
    semantic_encoder_seed: int = 101
    identity_encoder_seed: int = 102
    semantic_grid: int = 4

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        d["render"] = RenderConfig(**d["render"])
        d["codec"] = CodecConfig(**d["codec"])
        unet = dict(d["unet"])
        unet["block_channels"] = tuple(unet["block_channels"])
        unet["self_attn_resolutions"] = tuple(unet["self_attn_resolutions"])
        d["unet"] = UNetConfig(**unet)
        d["projection"] = ProjectionConfig(**d["projection"])
        d["schedule"] = ScheduleConfig(**d["schedule"])
        d["loss"] = LossConfig(**d["loss"])
        d["optimizer"] = OptimizerConfig(**d["optimizer"])
        d["train"] = TrainConfig(**d["train"])
        d["finetune"] = FinetuneConfig(**d["finetune"])
        ds = dict(d["dataset"])
        ranges = dict(ds["ranges"])
        ranges["light_ambient"] = tuple(ranges["light_ambient"])
        ds["ranges"] = SamplingRanges(**ranges)
        d["dataset"] = DatasetConfig(**ds)
        return cls(**d)


def toy_profile() -> PipelineConfig:
    """Desk-scale profile: 32px images, 16x16x12 patchify latents."""
    codec = CodecConfig(mode="orthonormal_patchify", patch=2, mixing_seed=11)
    unet = UNetConfig(
        in_channels=12,
        out_channels=12,
        block_channels=(32, 64),
        layers_per_block=1,
        attn_head_dim=8,
        context_dim=64,
        context_tokens=16,
        sample_size=16,
        self_attn_resolutions=(16, 8),
        injection_projection_zero_init=True,
    )
    projection = ProjectionConfig(
        depth=2, heads=4, queries=16, output_dim=64, d_semantic=32, d_identity=32,
        ff_mult=2,
    )
    return PipelineConfig(
        profile="toy",
        render=RenderConfig(),
        codec=codec,
        unet=unet,
        projection=projection,
        # Reference learning rate 1e-5 is tied to production scale; the toy
        # nets need a proportionally larger step to move in a few thousand
        # iterations.
        train=TrainConfig(steps=3000, batch_size=4, learning_rate=2e-4),
        finetune=FinetuneConfig(steps=50, copies=8, learning_rate=4e-4),
        dataset=DatasetConfig(n_identities=64, variations_per_identity=8),
    )


def full_profile() -> PipelineConfig:
    """Production-scale reference values (preset only; not trained here)."""
    codec = CodecConfig(mode="trainable_conv", patch=8, latent_channels=4, mixing_seed=11)
    unet = UNetConfig(
        in_channels=4,
        out_channels=4,
        block_channels=(320, 640, 1280, 1280),
        layers_per_block=2,
        attn_head_dim=8,
        context_dim=1280,
        context_tokens=16,
        sample_size=64,
        self_attn_resolutions=(64, 32, 16),
        injection_projection_zero_init=True,
    )
    projection = ProjectionConfig(
        depth=4, heads=20, queries=16, output_dim=1280, d_semantic=768, d_identity=512,
    )
    return PipelineConfig(
        profile="full",
        render=RenderConfig(resolution=256, v_target=642),
        codec=codec,
        unet=unet,
        projection=projection,
        train=TrainConfig(steps=55000, batch_size=6),
        finetune=FinetuneConfig(steps=50, copies=8),
        dataset=DatasetConfig(n_identities=512, variations_per_identity=8),
    )


def profile_config(name: str) -> PipelineConfig:
    name = _PROFILE_ALIASES.get(name, name)
    if name == "toy":
        return toy_profile()
    if name == "full":
        return full_profile()
    raise ValueError(f"unknown profile {name!r}; pick from {PROFILES}")


# Flat override keys accepted in config files, mapped onto nested fields.
_FLAT_KEYS = {
    "learning_rate": ("optimizer", "learning_rate"),
    "adam_beta1": ("optimizer", "beta1"),
    "adam_beta2": ("optimizer", "beta2"),
    "adam_weight_decay": ("optimizer", "weight_decay"),
    "adam_epsilon": ("optimizer", "epsilon"),
    "grad_clip_norm": ("optimizer", "grad_clip_norm"),
    "num_training_timesteps": ("schedule", "num_timesteps"),
    "beta_start": ("schedule", "beta_start"),
    "beta_end": ("schedule", "beta_end"),
    "beta_schedule": ("schedule", "kind"),
    "noise_offset": ("loss", "noise_offset"),
    "snr_gamma": ("loss", "snr_gamma"),
    "attention_head_dim": ("unet", "attn_head_dim"),
    "sample_size": ("unet", "sample_size"),
    "input_channels": ("unet", "in_channels"),
    "output_channels": ("unet", "out_channels"),
    "block_output_channels": ("unet", "block_channels"),
    "self_attn_resolutions": ("unet", "self_attn_resolutions"),
    "layers_per_block": ("unet", "layers_per_block"),
    "injection_projection_zero_init": ("unet", "injection_projection_zero_init"),
    "projection_module_depth": ("projection", "depth"),
    "projection_module_heads": ("projection", "heads"),
    "projection_module_queries": ("projection", "queries"),
    "projection_module_output_dimension": ("projection", "output_dim"),
    "image_input_size": ("render", "resolution"),
}

_SECTION_FIELDS = {
    "render": RenderConfig,
    "dataset": DatasetConfig,
    "train": TrainConfig,
    "finetune": FinetuneConfig,
}

_SCHEDULE_ALIAS = {"scaled linear": "scaled_linear", "Scaled Linear": "scaled_linear"}


def _apply_overrides(config: PipelineConfig, raw: dict) -> PipelineConfig:
    unet_over: dict = {}
    proj_over: dict = {}
    for key, value in raw.items():
        if key == "profile":
            continue
        if key in ("context_mode", "guidance_time_conditioning", "semantic_grid",
                   "unet_seed", "projection_seed", "semantic_encoder_seed",
                   "identity_encoder_seed"):
            setattr(config, key, value)
            continue
        if key in _SECTION_FIELDS:
            section = getattr(config, key)
            sub = dict(value)
            if key == "dataset" and "ranges" in sub:
                ranges = dict(dataclasses.asdict(section.ranges))
                ranges.update(sub.pop("ranges"))
                if isinstance(ranges["light_ambient"], list):
                    ranges["light_ambient"] = tuple(ranges["light_ambient"])
                section.ranges = SamplingRanges(**ranges)
            for name, v in sub.items():
                if not hasattr(section, name):
                    raise ValueError(f"unknown config key {key}.{name}")
                setattr(section, name, v)
            continue
        if key not in _FLAT_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        section_name, attr = _FLAT_KEYS[key]
        if key == "beta_schedule":
            value = _SCHEDULE_ALIAS.get(value, value)
        if section_name == "unet":
            if isinstance(value, list):
                value = tuple(value)
            unet_over[attr] = value
        elif section_name == "projection":
            proj_over[attr] = value
        else:
            setattr(getattr(config, section_name), attr, value)
    if unet_over:
        config.unet = dataclasses.replace(config.unet, **unet_over)
    if proj_over:
        config.projection = dataclasses.replace(config.projection, **proj_over)
    return config


def load_config(path) -> PipelineConfig:
    """Read a YAML (or JSON) config file: profile selector plus overrides."""
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"config file {path} must hold a mapping")
    config = profile_config(raw.get("profile", "toy"))
    return _apply_overrides(config, raw)
