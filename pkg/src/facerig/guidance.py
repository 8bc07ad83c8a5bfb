"""Conditional-map fusion and the guidance network.

The fusion step encodes each conditional map with the frozen codec and
concatenates the latents along channels (fixed order: albedo, normal,
render) -- no trainable parameters.  The guidance net is a clone of the
denoiser whose input conv accepts the 3x-wide fused latent; its hidden
state before each self-attention layer is captured and added (through the
receiver's injection projections) at the matching site of the denoiser.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .codec import LatentCodec
from .morphable import ConditionalMaps
from .unet import DenoiserNet

CHANNEL_GROUP_ORDER = ("albedo", "normal", "render")


@dataclass
class FusedConditional:
    """Channel concatenation of the three conditional-map latents."""

    latent: np.ndarray  # (h, w, 3C), channel groups in CHANNEL_GROUP_ORDER


def fuse_conditionals(maps: ConditionalMaps, codec: LatentCodec) -> FusedConditional:
    """Encode albedo/normal/render maps and concatenate channel-wise."""
    expected = codec.latent_shape(maps.resolution)  # raises on mismatch
    parts = [
        codec.encode(maps.albedo_map),
        codec.encode(maps.normal_map),
        codec.encode(maps.render_map),
    ]
    fused = np.concatenate(parts, axis=2)
    assert fused.shape[:2] == expected[:2]
    return FusedConditional(latent=fused)


def fused_to_tensor(fused: FusedConditional, dtype=torch.float32) -> torch.Tensor:
    """(h, w, 3C) numpy -> (1, 3C, h, w) tensor."""
    arr = np.moveaxis(fused.latent, -1, 0)[None]
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def init_guidance_from_diffusion(diffusion_net: DenoiserNet) -> DenoiserNet:
    """Clone the denoiser into a guidance net over 3x input channels.

    All parameters are copied bitwise except the input convolution, whose
    kernel is tiled across the three channel groups and scaled by 1/3, so
    three identical latents produce the denoiser's first-conv response.
    The guidance net has no injection receivers of its own.
    """
    cfg = diffusion_net.config
    gcfg = replace(cfg, in_channels=3 * cfg.in_channels, receives_injection=False)
    gnet = DenoiserNet(gcfg, seed=diffusion_net.seed)
    src_dtype = next(diffusion_net.parameters()).dtype
    if next(gnet.parameters()).dtype != src_dtype:
        gnet = gnet.to(src_dtype)
    src = dict(diffusion_net.named_parameters())
    with torch.no_grad():
        for name, p in gnet.named_parameters():
            if name == "conv_in.weight":
                w = src[name]
                p.copy_(torch.cat([w, w, w], dim=1) / 3.0)
            else:
                p.copy_(src[name])
    return gnet


def guidance_forward(
    gnet: DenoiserNet,
    fused: torch.Tensor,
    t,
    context: torch.Tensor,
) -> list[torch.Tensor]:
    """Run the guidance net and return per-site features, in site order.

    The guidance net's own output latent is discarded (its forward stops
    after the last capture site); only the hidden states entering each
    self-attention layer are kept.
    """
    _, features = gnet(fused, t, context, capture_features=True, capture_only=True)
    return features


def conditioned_denoise(
    diffusion_net: DenoiserNet,
    gnet: DenoiserNet,
    z_t: torch.Tensor,
    t,
    fused: torch.Tensor,
    context: torch.Tensor,
    site_mask: list[bool] | None = None,
    cached_features: list[torch.Tensor] | None = None,
) -> torch.Tensor:
    """Single entry point for conditioned noise prediction.

    Captures guidance features for the fused conditional (or reuses
    `cached_features`) and injects them into the denoiser.  `site_mask`
    optionally disables injection at individual sites.
    """
    n_sites = len(diffusion_net.injection_sites())
    if len(gnet.injection_sites()) != n_sites:
        raise ValueError("guidance and diffusion nets disagree on injection sites")
    features = cached_features
    if features is None:
        features = guidance_forward(gnet, fused, t, context)
    if site_mask is not None:
        if len(site_mask) != n_sites:
            raise ValueError(f"site_mask must have {n_sites} entries")
        features = [f if keep else None for f, keep in zip(features, site_mask)]
    return diffusion_net(z_t, t, context, injected=features)
