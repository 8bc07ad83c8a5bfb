"""Frozen image <-> latent codec.

Default mode is a lossless orthonormal patchify transform (space-to-depth
followed by a fixed seeded orthogonal channel mix), which makes encode and
decode exact inverses.  A trainable stride-p convolutional mode exists to
mirror lossy learned autoencoders; it is trained separately and then
frozen like everything else in the codec.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

PATCHIFY = "orthonormal_patchify"
TRAINABLE_CONV = "trainable_conv"


@dataclass
class CodecConfig:
    mode: str = PATCHIFY
    patch: int = 2
    latent_channels: int | None = None  # forced to 3 * patch**2 in patchify mode
    scale_factor: float = 1.0
    mixing_seed: int | None = 11  # None -> identity mixing

    def __post_init__(self):
        if self.mode not in (PATCHIFY, TRAINABLE_CONV):
            raise ValueError(f"unknown codec mode {self.mode!r}")
        if self.patch < 1:
            raise ValueError("patch must be >= 1")
        if self.mode == PATCHIFY:
            forced = 3 * self.patch * self.patch
            if self.latent_channels not in (None, forced):
                raise ValueError(
                    f"patchify mode forces latent_channels = {forced}"
                )
            self.latent_channels = forced
        elif self.latent_channels is None:
            self.latent_channels = 4
        if self.scale_factor <= 0:
            raise ValueError("scale_factor must be positive")


def _mixing_matrix(dim: int, seed: int | None) -> np.ndarray:
    if seed is None:
        return np.eye(dim)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0DEC]))
    g = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


class _ConvCodec(nn.Module):
    """Stride-p conv encoder/decoder pair used by the trainable mode."""

    def __init__(self, patch: int, channels: int, seed: int):
        super().__init__()
        self.enc = nn.Conv2d(3, channels, patch, stride=patch)
        self.dec = nn.ConvTranspose2d(channels, 3, patch, stride=patch)
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for p in self.parameters():
                if p.ndim > 1:
                    fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                    p.copy_(torch.randn(p.shape, generator=g) / fan_in**0.5)
                else:
                    p.zero_()


class LatentCodec:
    """Maps float images in [0, 1] (R, R, 3) to latents (R/p, R/p, C).

    Stateless after construction apart from the calibrated scale factor;
    safe to share across threads.  Latent math runs in float64 so the
    patchify round trip is exact to well under 1e-6.
    """

    def __init__(self, config: CodecConfig):
        self.config = config
        self.mixing = _mixing_matrix(3 * config.patch**2, config.mixing_seed)
        self.conv: _ConvCodec | None = None
        if config.mode == TRAINABLE_CONV:
            self.conv = _ConvCodec(
                config.patch, config.latent_channels, config.mixing_seed or 0
            )
            self.conv.requires_grad_(False)

    @property
    def latent_channels(self) -> int:
        return int(self.config.latent_channels)

    @property
    def scale_factor(self) -> float:
        return float(self.config.scale_factor)

    def latent_shape(self, resolution: int) -> tuple[int, int, int]:
        p = self.config.patch
        if resolution % p:
            raise ValueError(f"resolution {resolution} not divisible by patch {p}")
        return (resolution // p, resolution // p, self.latent_channels)

    def _check_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] != image.shape[1]:
            raise ValueError(f"expected a square (R, R, 3) image, got {image.shape}")
        if image.shape[0] % self.config.patch:
            raise ValueError(
                f"resolution {image.shape[0]} not divisible by patch {self.config.patch}"
            )
        return image

    def encode(self, image: np.ndarray) -> np.ndarray:
        """Image -> latent, divided by the calibrated scale factor."""
        image = self._check_image(image)
        if self.conv is not None:
            with torch.no_grad():
                x = torch.from_numpy(image).float().permute(2, 0, 1)[None]
                z = self.conv.enc(x)[0].permute(1, 2, 0).double().numpy()
            return z / self.scale_factor
        p = self.config.patch
        h = image.shape[0] // p
        blocks = image.reshape(h, p, h, p, 3).transpose(0, 2, 1, 3, 4).reshape(h, h, -1)
        return blocks @ self.mixing.T / self.scale_factor

    def decode(self, latent: np.ndarray) -> np.ndarray:
        """Latent -> image; the exact inverse of encode in patchify mode."""
        latent = np.asarray(latent, dtype=np.float64)
        if latent.ndim != 3 or latent.shape[2] != self.latent_channels:
            raise ValueError(
                f"expected (h, w, {self.latent_channels}) latent, got {latent.shape}"
            )
        if self.conv is not None:
            with torch.no_grad():
                z = torch.from_numpy(latent * self.scale_factor).float()
                x = self.conv.dec(z.permute(2, 0, 1)[None])[0]
            return x.permute(1, 2, 0).double().numpy()
        p = self.config.patch
        h = latent.shape[0]
        blocks = (latent * self.scale_factor) @ self.mixing
        return blocks.reshape(h, h, p, p, 3).transpose(0, 2, 1, 3, 4).reshape(h * p, h * p, 3)

    def unscaled_encode(self, image: np.ndarray) -> np.ndarray:
        return self.encode(image) * self.scale_factor

    def calibrate_scale(self, images: list[np.ndarray] | np.ndarray) -> float:
        """Set scale_factor to the std of unscaled latent entries over a batch."""
        latents = np.stack([self.unscaled_encode(im) for im in images])
        scale = float(np.std(latents))
        if scale < 1e-12:
            raise ValueError("cannot calibrate scale on a zero-variance batch")
        self.config.scale_factor = scale
        return scale

    def named_arrays(self) -> dict[str, np.ndarray]:
        arrays = {
            "mixing": self.mixing.copy(),
            "scale_factor": np.array([self.scale_factor]),
        }
        if self.conv is not None:
            for name, p in self.conv.named_parameters():
                arrays[f"conv.{name}"] = p.detach().double().numpy().copy()
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.mixing = np.asarray(arrays["mixing"], dtype=np.float64)
        self.config.scale_factor = float(np.asarray(arrays["scale_factor"]).reshape(-1)[0])
        if self.conv is not None:
            state = {
                name: torch.from_numpy(np.asarray(arrays[f"conv.{name}"])).float()
                for name, _ in self.conv.named_parameters()
            }
            self.conv.load_state_dict(state)


def train_conv_codec(
    codec: LatentCodec,
    images: list[np.ndarray],
    steps: int = 200,
    lr: float = 1e-2,
    seed: int = 0,
) -> list[float]:
    """Fit the trainable conv codec with plain L2 reconstruction.

    Returns the per-step loss series.  The codec is frozen again afterwards.
    """
    if codec.conv is None:
        raise ValueError("codec is not in trainable_conv mode")
    x = torch.from_numpy(np.stack(images)).float().permute(0, 3, 1, 2)
    codec.conv.requires_grad_(True)
    opt = torch.optim.Adam(codec.conv.parameters(), lr=lr)
    torch.manual_seed(seed)
    losses = []
    for _ in range(steps):
        opt.zero_grad()
        recon = codec.conv.dec(codec.conv.enc(x))
        loss = ((recon - x) ** 2).mean()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    codec.conv.requires_grad_(False)
    return losses
