"""Bundle of all pipeline components plus checkpoint (de)serialization.

The pipeline owns the frozen codec and encoders, the denoiser, the
guidance net, and the projection module, and knows how to turn dataset
samples into the tensors a training step consumes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from . import checkpoint as ckpt
from .codec import LatentCodec
from .config import PipelineConfig
from .diffusion import NoiseSchedule, PreparedBatch, make_schedule
from .guidance import fuse_conditionals, init_guidance_from_diffusion
from .identity import ContextBuilder, IdentityEncoder, ProjectionModule, SemanticEncoder
from .morphable import ConditionalMaps
from .unet import DenoiserNet

COMPONENTS = ("diffusion", "guidance", "projection")


@dataclass
class Pipeline:
    config: PipelineConfig
    codec: LatentCodec
    diffusion_net: DenoiserNet
    guidance_net: DenoiserNet
    projection: ProjectionModule
    semantic_encoder: SemanticEncoder
    identity_encoder: IdentityEncoder
    schedule: NoiseSchedule

    @classmethod
    def build(cls, config: PipelineConfig) -> "Pipeline":
        codec = LatentCodec(config.codec)
        latent_channels = codec.latent_channels
        unet_cfg = config.unet
        if unet_cfg.in_channels != latent_channels:
            unet_cfg = dataclasses.replace(
                unet_cfg, in_channels=latent_channels, out_channels=latent_channels
            )
            config.unet = unet_cfg
        dnet = DenoiserNet(unet_cfg, seed=config.unet_seed)
        gnet = init_guidance_from_diffusion(dnet)
        projection = ProjectionModule(config.projection, seed=config.projection_seed)
        sem = SemanticEncoder(
            out_dim=config.projection.d_semantic,
            grid=config.semantic_grid,
            seed=config.semantic_encoder_seed,
        )
        idt = IdentityEncoder(
            out_dim=config.projection.d_identity, seed=config.identity_encoder_seed
        )
        schedule = make_schedule(
            config.schedule.beta_start,
            config.schedule.beta_end,
            config.schedule.num_timesteps,
            config.schedule.kind,
        )
        return cls(config, codec, dnet, gnet, projection, sem, idt, schedule)

    # -- data preparation ----------------------------------------------------

    def context_builder(self, mode: str | None = None) -> ContextBuilder:
        return ContextBuilder(
            mode or self.config.context_mode,
            self.semantic_encoder,
            self.identity_encoder,
            self.projection,
        )

    def prepare_sample(self, maps: ConditionalMaps) -> dict[str, np.ndarray | None]:
        """Frozen-path tensors for one sample (cacheable across steps)."""
        z0 = self.codec.encode(maps.image).astype(np.float32)
        fused = fuse_conditionals(maps, self.codec).latent.astype(np.float32)
        mode = self.config.context_mode
        sem = idt = None
        if mode in ("both", "semantic_only"):
            sem = self.semantic_encoder.encode(maps.image).tokens.astype(np.float32)
        if mode in ("both", "identity_only"):
            idt = self.identity_encoder.encode(maps.image, maps.mask).tokens.astype(
                np.float32
            )
        return {"z0": z0, "fused": fused, "semantic": sem, "identity": idt}

    def collate(self, prepared: list[dict]) -> PreparedBatch:
        def stack_maps(key):
            if prepared[0][key] is None:
                return None
            arr = np.stack([p[key] for p in prepared])
            if arr.ndim == 4:  # (B, h, w, C) -> (B, C, h, w)
                arr = np.moveaxis(arr, -1, 1)
            return torch.from_numpy(np.ascontiguousarray(arr))

        return PreparedBatch(
            z0=stack_maps("z0"),
            fused=stack_maps("fused"),
            semantic=stack_maps("semantic"),
            identity=stack_maps("identity"),
        )

    def prepare_batch(self, maps_list: list[ConditionalMaps]) -> PreparedBatch:
        return self.collate([self.prepare_sample(m) for m in maps_list])

    def context_for(self, image: np.ndarray, mask: np.ndarray) -> torch.Tensor:
        return self.context_builder().context(image, mask)

    def fused_tensor(self, maps: ConditionalMaps) -> torch.Tensor:
        fused = fuse_conditionals(maps, self.codec).latent.astype(np.float32)
        return torch.from_numpy(np.ascontiguousarray(np.moveaxis(fused, -1, 0)))[None]

    # -- parameter bookkeeping ------------------------------------------------

    def component_parameters(self, component: str) -> dict[str, torch.Tensor]:
        net = {
            "diffusion": self.diffusion_net,
            "guidance": self.guidance_net,
            "projection": self.projection,
        }[component]
        return dict(net.named_parameters())

    def named_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        for key, arr in self.codec.named_arrays().items():
            arrays[f"codec/{key}"] = arr
        for component in COMPONENTS:
            for name, p in self.component_parameters(component).items():
                arrays[f"{component}/{name}"] = p.detach().cpu().numpy().copy()
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        codec_arrays = {
            key[len("codec/"):]: arr
            for key, arr in arrays.items()
            if key.startswith("codec/")
        }
        self.codec.load_arrays(codec_arrays)
        with torch.no_grad():
            for component in COMPONENTS:
                params = self.component_parameters(component)
                for name, p in params.items():
                    key = f"{component}/{name}"
                    if key not in arrays:
                        raise ValueError(f"checkpoint is missing array {key!r}")
                    p.copy_(torch.from_numpy(np.asarray(arrays[key])))

    def snapshot(self) -> dict[str, np.ndarray]:
        """Bitwise copy of every named array, for freeze audits."""
        return self.named_arrays()

    def param_tags(self) -> dict[str, tuple[str, str]]:
        tags = {}
        for component, net in (("diffusion", self.diffusion_net), ("guidance", self.guidance_net)):
            for name, _ in net.named_parameters():
                tag = net.param_tag(name)
                tags[f"{component}/{name}"] = (tag.block, tag.layer_kind)
        return tags

    # -- checkpointing ---------------------------------------------------------

    def save(
        self,
        path,
        extra_arrays: dict[str, np.ndarray] | None = None,
        extra_metadata: dict | None = None,
    ) -> None:
        arrays = self.named_arrays()
        if extra_arrays:
            arrays.update(extra_arrays)
        metadata = {
            "config": self.config.to_dict(),
            "param_tags": {k: list(v) for k, v in self.param_tags().items()},
            "schedule": {
                "beta_start": self.schedule.beta_start,
                "beta_end": self.schedule.beta_end,
                "num_timesteps": self.schedule.num_timesteps,
                "kind": self.schedule.kind,
            },
        }
        if extra_metadata:
            metadata.update(extra_metadata)
        ckpt.save_checkpoint(path, arrays, metadata)

    @classmethod
    def from_checkpoint(cls, path) -> tuple["Pipeline", dict[str, np.ndarray], dict]:
        """Rebuild a pipeline from a checkpoint.

        Returns (pipeline, arrays, metadata); arrays retains optimizer and
        trainer state for resuming.
        """
        arrays, metadata = ckpt.load_checkpoint(path)
        config = PipelineConfig.from_dict(metadata["config"])
        pipe = cls.build(config)
        pipe.load_arrays(arrays)
        return pipe, arrays, metadata
