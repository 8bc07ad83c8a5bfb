"""Identity-preserving context: frozen token encoders plus a learnable
latent-query attention projection.

Two deterministic stub encoders stand in for pretrained image encoders:
a semantic encoder summarizing the whole frame as per-cell channel
statistics, and an identity encoder summarizing only the masked face
region.  Their token streams are merged by a projection module whose
learned queries cross-attend to the concatenated tokens, producing a
fixed number of context tokens for cross-attention in both UNets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

CONTEXT_MODES = ("both", "semantic_only", "identity_only", "none")


@dataclass
class TokenEmbedding:
    tokens: np.ndarray  # (T, d)
    source: str  # semantic | identity

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError("tokens must be a (T, d) matrix with T >= 1")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("tokens contain non-finite values")


class SemanticEncoder:
    """Frozen whole-frame summary: per-cell channel statistics plus the cell
    coordinates, lifted by a fixed seeded projection.  One token per cell.

    The coordinate features tag each token with where its cell sits, so a
    downstream reader can reconstruct the spatial layout; their projected
    contribution is exposed as `coordinate_offsets` (tokens of a spatially
    uniform image are equal once those offsets are subtracted).
    """

    def __init__(self, out_dim: int = 32, grid: int = 4, seed: int = 101):
        self.out_dim = out_dim
        self.grid = grid
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5E]))
        self.projection = rng.standard_normal((8, out_dim)) / math.sqrt(8.0)
        centers = (np.arange(grid) + 0.5) / grid
        rows, cols = np.meshgrid(centers, centers, indexing="ij")
        self._coords = np.stack([rows, cols], axis=-1).reshape(-1, 2)

    @property
    def coordinate_offsets(self) -> np.ndarray:
        """Per-cell token contribution of the coordinate features (T_s, d)."""
        return self._coords @ self.projection[6:]

    def encode(self, image: np.ndarray) -> TokenEmbedding:
        image = np.asarray(image, dtype=np.float64)
        r = image.shape[0]
        if image.ndim != 3 or image.shape != (r, r, 3) or r % self.grid:
            raise ValueError(
                f"expected square RGB image with side divisible by {self.grid}"
            )
        cell = r // self.grid
        cells = image.reshape(self.grid, cell, self.grid, cell, 3)
        mean = cells.mean(axis=(1, 3)).reshape(-1, 3)
        std = cells.std(axis=(1, 3)).reshape(-1, 3)
        feats = np.concatenate([mean, std, self._coords], axis=-1)
        return TokenEmbedding(tokens=feats @ self.projection, source="semantic")


def _resize_bilinear(img: np.ndarray, out: int) -> np.ndarray:
    """Plain bilinear resample of an (H, W, C) array to (out, out, C)."""
    h, w = img.shape[:2]
    ys = (np.arange(out) + 0.5) * h / out - 0.5
    xs = (np.arange(out) + 0.5) * w / out - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


class IdentityEncoder:
    """Frozen face-region summary: masked bbox crop, resampled, quadrant tokens.

    Pixels outside the mask are zeroed before cropping, so the tokens are a
    function of the masked region only.  Per-pixel features are chromaticity
    (weighted up, since shading is mostly gray) plus brightness-normalized
    luminance, under a center-emphasizing window that damps the pose-sensitive
    crop boundary; a fixed seeded projection maps each quadrant to a token.
    """

    CHROMA_WEIGHT = 6.0
    LUMA_WEIGHT = 1.0
    WINDOW_SIGMA = 5.0

    def __init__(self, out_dim: int = 32, patch: int = 16, seed: int = 102):
        if patch % 2:
            raise ValueError("patch must be even")
        self.out_dim = out_dim
        self.patch = patch
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1D]))
        feat = 3 * (patch // 2) ** 2
        self.projections = rng.standard_normal((4, feat, out_dim)) / math.sqrt(feat)
        grid = np.arange(patch) - (patch - 1) / 2.0
        self.window = np.exp(
            -(grid[:, None] ** 2 + grid[None, :] ** 2) / (2.0 * self.WINDOW_SIGMA**2)
        )

    def _features(self, patch: np.ndarray) -> np.ndarray:
        s = patch.sum(axis=2) + 1e-6
        lit = s > 0.05
        mean_intensity = s[lit].mean() if lit.any() else 1.0
        luma = s / max(mean_intensity, 1e-6)
        chroma = np.stack([patch[..., 0] / s, patch[..., 1] / s], axis=-1)
        feat = np.concatenate(
            [self.CHROMA_WEIGHT * chroma, self.LUMA_WEIGHT * luma[..., None]], axis=-1
        )
        return feat * self.window[:, :, None]

    def encode(self, image: np.ndarray, mask: np.ndarray) -> TokenEmbedding:
        image = np.asarray(image, dtype=np.float64)
        mask = np.asarray(mask).astype(bool)
        if image.ndim != 3 or mask.shape != image.shape[:2]:
            raise ValueError("image must be (R, R, 3) with a matching (R, R) mask")
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        if rows.size == 0:
            raise ValueError("mask is empty: no face region to encode")
        masked = image * mask[:, :, None]
        crop = masked[rows[0]: rows[-1] + 1, cols[0]: cols[-1] + 1]
        patch = self._features(_resize_bilinear(crop, self.patch))
        half = self.patch // 2
        quadrants = [
            patch[:half, :half], patch[:half, half:],
            patch[half:, :half], patch[half:, half:],
        ]
        tokens = np.stack(
            [q.reshape(-1) @ self.projections[i] for i, q in enumerate(quadrants)]
        )
        return TokenEmbedding(tokens=tokens, source="identity")


@dataclass(frozen=True)
class ProjectionConfig:
    depth: int = 4
    heads: int = 20
    queries: int = 16
    output_dim: int = 1280
    d_semantic: int = 768
    d_identity: int = 512
    ff_mult: int = 4
    kv_include_latents: bool = True

    def __post_init__(self):
        if self.output_dim % self.heads:
            raise ValueError("output_dim must be divisible by heads")


class _ResamplerAttention(nn.Module):
    """Latent queries attend to (input tokens ++ latents), pre-normalized."""

    def __init__(self, dim: int, heads: int, kv_include_latents: bool):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.kv_include_latents = kv_include_latents
        self.norm_x = nn.LayerNorm(dim)
        self.norm_lat = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, latents):
        xn = self.norm_x(x)
        ln = self.norm_lat(latents)
        kv = torch.cat([xn, ln], dim=1) if self.kv_include_latents else xn
        b, n, _ = ln.shape
        m = kv.shape[1]
        q = self.to_q(ln).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.to_k(kv).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        v = self.to_v(kv).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (w @ v).transpose(1, 2).reshape(b, n, -1)
        return self.to_out(out)


class _FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * mult)
        self.fc2 = nn.Linear(dim * mult, dim)

    def forward(self, x):
        return self.fc2(torch.nn.functional.gelu(self.fc1(self.norm(x))))


class ProjectionModule(nn.Module):
    """Merge semantic and identity token streams into context tokens.

    Per-stream linears align widths, the streams are concatenated token-wise,
    and `depth` blocks of latent-query attention + feed-forward (residual
    adds, pre-norm) refine a learned set of queries.  Output is always
    (batch, queries, output_dim) regardless of the input token counts; when
    both streams are absent a learned null token set is attended instead.
    """

    def __init__(self, config: ProjectionConfig, seed: int = 0):
        super().__init__()
        self.config = config
        dim = config.output_dim
        self.sem_proj = nn.Linear(config.d_semantic, dim)
        self.id_proj = nn.Linear(config.d_identity, dim)
        self.latents = nn.Parameter(torch.zeros(config.queries, dim))
        self.null_tokens = nn.Parameter(torch.zeros(4, dim))
        self.blocks = nn.ModuleList(
            [
                nn.ModuleList(
                    [
                        _ResamplerAttention(dim, config.heads, config.kv_include_latents),
                        _FeedForward(dim, config.ff_mult),
                    ]
                )
                for _ in range(config.depth)
            ]
        )
        self.norm_out = nn.LayerNorm(dim)
        self._init_parameters(seed)

    def _init_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(int(seed))
        dim = self.config.output_dim
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.ndim == 1:
                    is_norm_weight = "norm" in name and name.endswith("weight")
                    p.fill_(1.0 if is_norm_weight else 0.0)
                elif name in ("latents", "null_tokens"):
                    p.copy_(
                        torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype)
                        / math.sqrt(dim)
                    )
                else:
                    fan_in = p.shape[1]
                    p.copy_(
                        torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype)
                        / math.sqrt(fan_in)
                    )

    def forward(
        self,
        semantic: torch.Tensor | None,
        identity: torch.Tensor | None,
    ) -> torch.Tensor:
        streams = []
        if semantic is not None:
            if semantic.shape[-1] != self.config.d_semantic:
                raise ValueError(
                    f"semantic width {semantic.shape[-1]} != {self.config.d_semantic}"
                )
            streams.append(self.sem_proj(semantic))
        if identity is not None:
            if identity.shape[-1] != self.config.d_identity:
                raise ValueError(
                    f"identity width {identity.shape[-1]} != {self.config.d_identity}"
                )
            streams.append(self.id_proj(identity))
        if streams:
            x = torch.cat(streams, dim=1)
            batch = x.shape[0]
        else:
            raise ValueError("at least one stream or a batch size is required")
        lat = self.latents[None].expand(batch, -1, -1)
        for attn, ff in self.blocks:
            lat = lat + attn(x, lat)
            lat = lat + ff(lat)
        return self.norm_out(lat)

    def forward_null(self, batch: int) -> torch.Tensor:
        """Context from the learned null token set (no encoder streams)."""
        x = self.null_tokens[None].expand(batch, -1, -1)
        lat = self.latents[None].expand(batch, -1, -1)
        for attn, ff in self.blocks:
            lat = lat + attn(x, lat)
            lat = lat + ff(lat)
        return self.norm_out(lat)


def project(
    semantic: TokenEmbedding | None,
    identity: TokenEmbedding | None,
    module: ProjectionModule,
) -> torch.Tensor:
    """Single-sample convenience wrapper around ProjectionModule.forward."""
    dtype = next(module.parameters()).dtype
    sem = (
        torch.from_numpy(np.ascontiguousarray(semantic.tokens)).to(dtype)[None]
        if semantic is not None
        else None
    )
    idt = (
        torch.from_numpy(np.ascontiguousarray(identity.tokens)).to(dtype)[None]
        if identity is not None
        else None
    )
    if sem is None and idt is None:
        return module.forward_null(1)
    return module(sem, idt)


class ContextBuilder:
    """Selects which encoder streams feed the projection module."""

    def __init__(
        self,
        mode: str,
        semantic_encoder: SemanticEncoder,
        identity_encoder: IdentityEncoder,
        projection: ProjectionModule,
    ):
        if mode not in CONTEXT_MODES:
            raise ValueError(f"unknown context mode {mode!r}; pick from {CONTEXT_MODES}")
        self.mode = mode
        self.semantic_encoder = semantic_encoder
        self.identity_encoder = identity_encoder
        self.projection = projection

    def encode_streams(
        self, image: np.ndarray, mask: np.ndarray
    ) -> tuple[np.ndarray | None, np.ndarray | None]:
        sem = idt = None
        if self.mode in ("both", "semantic_only"):
            sem = self.semantic_encoder.encode(image).tokens.astype(np.float32)
        if self.mode in ("both", "identity_only"):
            idt = self.identity_encoder.encode(image, mask).tokens.astype(np.float32)
        return sem, idt

    def context(self, image: np.ndarray, mask: np.ndarray) -> torch.Tensor:
        sem, idt = self.encode_streams(image, mask)
        if sem is None and idt is None:
            return self.projection.forward_null(1)
        dtype = next(self.projection.parameters()).dtype
        sem_t = torch.from_numpy(sem)[None].to(dtype) if sem is not None else None
        idt_t = torch.from_numpy(idt)[None].to(dtype) if idt is not None else None
        return self.projection(sem_t, idt_t)


def ablation_context(
    mode: str,
    semantic_encoder: SemanticEncoder,
    identity_encoder: IdentityEncoder,
    projection: ProjectionModule,
) -> ContextBuilder:
    """Context builder for an encoder-stream ablation mode."""
    return ContextBuilder(mode, semantic_encoder, identity_encoder, projection)
