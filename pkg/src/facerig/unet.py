"""Conditional UNet denoiser with timestep embedding and injection sites.

The same class builds both the main denoiser and (via a wider input conv)
the guidance net.  Attention pairs (self-attention then cross-attention
over flattened spatial tokens, pre-normalized, residual adds) sit after
residual blocks at configured resolutions; the hidden state immediately
before each self-attention layer is both the capture point for guidance
features and the point where injected features are added on the receiving
net.

Every parameter carries exactly one (block, layer_kind) tag so freeze
experiments can select by block (down/mid/up) and layer kind
(residual/self_attn/cross_attn/other).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    out_channels: int
    block_channels: tuple[int, ...] = (32, 64)
    layers_per_block: int = 1
    attn_head_dim: int = 8
    context_dim: int = 64
    context_tokens: int = 16
    sample_size: int = 16
    self_attn_resolutions: tuple[int, ...] = (16, 8)
    injection_projection_zero_init: bool = True
    receives_injection: bool = True
    spatial_pos_embed: bool = False

    def __post_init__(self):
        if not self.block_channels:
            raise ValueError("block_channels must be nonempty")
        for ch in self.block_channels:
            if ch % self.attn_head_dim:
                raise ValueError(
                    f"channel width {ch} not divisible by head dim {self.attn_head_dim}"
                )


@dataclass(frozen=True)
class ParamGroupTag:
    block: str  # down | mid | up
    layer_kind: str  # residual | self_attn | cross_attn | other


@dataclass(frozen=True)
class InjectionSite:
    index: int
    block: str
    spatial: int
    channels: int


def sinusoidal_time_embedding(t, dim: int, dtype=torch.float64) -> torch.Tensor:
    """Interleaved sin/cos of t at geometric frequencies 10000^(-2k/dim)."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    t = torch.as_tensor(t, dtype=dtype)
    k = torch.arange(dim // 2, dtype=dtype)
    freqs = torch.pow(torch.tensor(10000.0, dtype=dtype), -2.0 * k / dim)
    ang = t[..., None] * freqs
    emb = torch.zeros(*t.shape, dim, dtype=dtype)
    emb[..., 0::2] = torch.sin(ang)
    emb[..., 1::2] = torch.cos(ang)
    return emb


def _norm_groups(channels: int) -> int:
    # At least 4 channels per group: one group per channel degenerates to
    # instance norm, which cancels the per-channel timestep shift exactly.
    for g in (8, 4, 2):
        if channels % g == 0 and channels // g >= 4:
            return g
    return 1


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_norm_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Attention(nn.Module):
    """Multi-head attention over token sequences (self when kv is None)."""

    def __init__(self, dim: int, kv_dim: int | None, head_dim: int):
        super().__init__()
        if dim % head_dim:
            raise ValueError("dim must be divisible by head_dim")
        self.heads = dim // head_dim
        self.head_dim = head_dim
        kv_dim = dim if kv_dim is None else kv_dim
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(kv_dim, dim, bias=False)
        self.to_v = nn.Linear(kv_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, kv=None):
        kv = x if kv is None else kv
        b, n, _ = x.shape
        m = kv.shape[1]
        q = self.to_q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.to_k(kv).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        v = self.to_v(kv).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (w @ v).transpose(1, 2).reshape(b, n, -1)
        return self.to_out(out)


class AttentionPair(nn.Module):
    """Pre-norm self-attention then cross-attention on flattened tokens.

    With spatial_pos_embed a learned per-position embedding is added to the
    tokens on entry, so attention queries know where they sit; otherwise
    position information must come from conv border effects alone.
    """

    def __init__(self, channels: int, context_dim: int, head_dim: int,
                 spatial: int = 0, spatial_pos_embed: bool = False):
        super().__init__()
        self.norm_self = nn.LayerNorm(channels)
        self.self_attn = Attention(channels, None, head_dim)
        self.norm_cross = nn.LayerNorm(channels)
        self.cross_attn = Attention(channels, context_dim, head_dim)
        if spatial_pos_embed:
            self.pos_embed = nn.Parameter(torch.zeros(spatial * spatial, channels))
        else:
            self.pos_embed = None

    def forward(self, h, context):
        b, c, height, width = h.shape
        x = h.reshape(b, c, height * width).transpose(1, 2)
        if self.pos_embed is not None:
            x = x + self.pos_embed[None]
        x = x + self.self_attn(self.norm_self(x))
        x = x + self.cross_attn(self.norm_cross(x), context)
        return x.transpose(1, 2).reshape(b, c, height, width)


class _Level(nn.Module):
    """One resolution level: residual blocks with optional attention pairs."""

    def __init__(self):
        super().__init__()
        self.res = nn.ModuleList()
        self.attn = nn.ModuleList()
        self.resample: nn.Module | None = None


class DenoiserNet(nn.Module):
    """UNet predicting noise from (z_t, t, context[, injected features])."""

    def __init__(self, config: UNetConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = int(seed)
        chans = config.block_channels
        ch0 = chans[0]
        temb_dim = 4 * ch0
        self._temb_dim = temb_dim
        ctx = config.context_dim
        hd = config.attn_head_dim
        lpb = config.layers_per_block

        self._sites: list[InjectionSite] = []

        def has_attn(spatial: int) -> bool:
            return spatial in config.self_attn_resolutions

        def register_site(block: str, spatial: int, channels: int) -> None:
            self._sites.append(
                InjectionSite(len(self._sites), block, spatial, channels)
            )

        self.conv_in = nn.Conv2d(config.in_channels, ch0, 3, padding=1)
        self.time_embed = nn.Sequential(
            nn.Linear(ch0, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )

        spatial = config.sample_size
        skip_channels = [ch0]
        self.down = nn.ModuleList()
        prev = ch0
        for i, ch in enumerate(chans):
            level = _Level()
            for _ in range(lpb):
                level.res.append(ResidualBlock(prev, ch, temb_dim))
                prev = ch
                if has_attn(spatial):
                    level.attn.append(AttentionPair(
                        ch, ctx, hd, spatial, config.spatial_pos_embed))
                    register_site("down", spatial, ch)
                skip_channels.append(ch)
            if i < len(chans) - 1:
                level.resample = nn.Conv2d(ch, ch, 3, stride=2, padding=1)
                spatial //= 2
                skip_channels.append(ch)
            self.down.append(level)

        self.mid_res1 = ResidualBlock(prev, prev, temb_dim)
        self.mid_attn = (
            AttentionPair(prev, ctx, hd, spatial, config.spatial_pos_embed)
            if has_attn(spatial) else None
        )
        if self.mid_attn is not None:
            register_site("mid", spatial, prev)
        self.mid_res2 = ResidualBlock(prev, prev, temb_dim)

        self.up = nn.ModuleList()
        for i, ch in enumerate(reversed(chans)):
            level = _Level()
            for _ in range(lpb + 1):
                level.res.append(ResidualBlock(prev + skip_channels.pop(), ch, temb_dim))
                prev = ch
                if has_attn(spatial):
                    level.attn.append(AttentionPair(
                        ch, ctx, hd, spatial, config.spatial_pos_embed))
                    register_site("up", spatial, ch)
            if i < len(chans) - 1:
                level.resample = nn.Conv2d(ch, ch, 3, padding=1)
                spatial *= 2
            self.up.append(level)

        self.norm_out = nn.GroupNorm(_norm_groups(ch0), ch0)
        self.conv_out = nn.Conv2d(ch0, config.out_channels, 3, padding=1)

        if config.receives_injection:
            self.inject = nn.ModuleList(
                [nn.Conv2d(s.channels, s.channels, 1) for s in self._sites]
            )
        else:
            self.inject = None

        self._init_parameters(seed)

    def _init_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith("inject."):
                    if name.endswith("bias"):
                        p.zero_()
                    elif self.config.injection_projection_zero_init:
                        p.zero_()
                    else:
                        p.copy_(torch.eye(p.shape[0], dtype=p.dtype).view(p.shape))
                elif name.endswith("pos_embed"):
                    p.copy_(
                        0.1 * torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype)
                    )
                elif p.ndim == 1:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                else:
                    fan_in = p.shape[1] * (p[0, 0].numel() if p.ndim == 4 else 1)
                    p.copy_(
                        torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype)
                        / math.sqrt(fan_in)
                    )

    # -- structure ---------------------------------------------------------

    def injection_sites(self) -> list[InjectionSite]:
        return list(self._sites)

    def param_tag(self, name: str) -> ParamGroupTag:
        """(block, layer_kind) tag of a named parameter."""

        def attn_kind(component: str) -> str:
            # the positional embedding feeds the self-attention tokens
            if component in ("norm_self", "self_attn", "pos_embed"):
                return "self_attn"
            return "cross_attn"

        parts = name.split(".")
        head = parts[0]
        if head in ("conv_in", "time_embed"):
            return ParamGroupTag("down", "other")
        if head in ("norm_out", "conv_out"):
            return ParamGroupTag("up", "other")
        if head == "inject":
            return ParamGroupTag(self._sites[int(parts[1])].block, "other")
        if head in ("mid_res1", "mid_res2"):
            return ParamGroupTag("mid", "residual")
        if head == "mid_attn":
            return ParamGroupTag("mid", attn_kind(parts[1]))
        if head in ("down", "up"):
            sub = parts[2]
            if sub == "res":
                return ParamGroupTag(head, "residual")
            if sub == "resample":
                return ParamGroupTag(head, "other")
            if sub == "attn":
                return ParamGroupTag(head, attn_kind(parts[4]))
        raise ValueError(f"unrecognized parameter name {name!r}")

    def param_groups(self) -> dict[ParamGroupTag, list[str]]:
        """Disjoint, exhaustive partition of parameter names by tag."""
        groups: dict[ParamGroupTag, list[str]] = {}
        for name, _ in self.named_parameters():
            groups.setdefault(self.param_tag(name), []).append(name)
        return groups

    # -- forward -----------------------------------------------------------

    def _time_features(self, t, batch: int, dtype, device) -> torch.Tensor:
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(batch)
        emb = sinusoidal_time_embedding(t, self.config.block_channels[0])
        return self.time_embed(emb.to(dtype=dtype, device=device))

    def _enter_site(self, h, context, pair, site_idx, injected, captured):
        if captured is not None:
            captured.append(h)
        if injected is not None:
            f = injected[site_idx]
            if f is not None:
                if f.shape != h.shape:
                    raise ValueError(
                        f"injected feature {site_idx} has shape {tuple(f.shape)}, "
                        f"expected {tuple(h.shape)}"
                    )
                h = h + (self.inject[site_idx](f) if self.inject is not None else f)
        return pair(h, context)

    def forward(self, z, t, context, injected=None, capture_features=False,
                capture_only=False):
        """Predict noise; optionally add injected site features or capture them.

        injected, when given, must hold one tensor (or None) per injection
        site, in site order.  With capture_features=True the return value is
        (output, [hidden state entering each self-attention layer]);
        capture_only additionally stops after the last site, skipping
        compute whose output would be discarded anyway.
        """
        cfg = self.config
        if z.ndim != 4 or z.shape[1] != cfg.in_channels:
            raise ValueError(f"expected (B, {cfg.in_channels}, H, W) input, got {tuple(z.shape)}")
        if z.shape[2] != cfg.sample_size or z.shape[3] != cfg.sample_size:
            raise ValueError(f"expected spatial size {cfg.sample_size}, got {tuple(z.shape[2:])}")
        if context.ndim != 3 or context.shape[-1] != cfg.context_dim:
            raise ValueError(f"expected (B, T, {cfg.context_dim}) context, got {tuple(context.shape)}")
        if context.shape[1] != cfg.context_tokens:
            raise ValueError(
                f"expected {cfg.context_tokens} context tokens, got {context.shape[1]}"
            )
        if injected is not None and len(injected) != len(self._sites):
            raise ValueError(
                f"expected {len(self._sites)} injected features, got {len(injected)}"
            )

        temb = self._time_features(t, z.shape[0], z.dtype, z.device)
        captured: list[torch.Tensor] | None = [] if capture_features else None
        n_sites = len(self._sites)
        stop_early = capture_features and capture_only and n_sites > 0
        site = 0

        h = self.conv_in(z)
        skips = [h]
        for level in self.down:
            for li, res in enumerate(level.res):
                h = res(h, temb)
                if li < len(level.attn):
                    if stop_early and site == n_sites - 1:
                        captured.append(h)
                        return None, captured
                    h = self._enter_site(h, context, level.attn[li], site, injected, captured)
                    site += 1
                skips.append(h)
            if level.resample is not None:
                h = level.resample(h)
                skips.append(h)

        h = self.mid_res1(h, temb)
        if self.mid_attn is not None:
            if stop_early and site == n_sites - 1:
                captured.append(h)
                return None, captured
            h = self._enter_site(h, context, self.mid_attn, site, injected, captured)
            site += 1
        h = self.mid_res2(h, temb)

        for level in self.up:
            for li, res in enumerate(level.res):
                h = res(torch.cat([h, skips.pop()], dim=1), temb)
                if li < len(level.attn):
                    if stop_early and site == n_sites - 1:
                        captured.append(h)
                        return None, captured
                    h = self._enter_site(h, context, level.attn[li], site, injected, captured)
                    site += 1
            if level.resample is not None:
                h = level.resample(F.interpolate(h, scale_factor=2, mode="nearest"))

        out = self.conv_out(F.silu(self.norm_out(h)))
        if capture_features:
            return out, captured
        return out


def build_unet(config: UNetConfig, seed: int = 0, dtype=torch.float32) -> DenoiserNet:
    """Build a denoiser with deterministic seeded initialization."""
    net = DenoiserNet(config, seed)
    if dtype != torch.float32:
        net = net.to(dtype)
        net._init_parameters(seed)  # redraw at full precision
    return net


def collect_injection_sites(net: DenoiserNet) -> list[InjectionSite]:
    """Sites in forward order: down shallow->deep, mid, up deep->shallow."""
    return net.injection_sites()


def clone_config(config: UNetConfig, **overrides) -> UNetConfig:
    return replace(config, **overrides)
