"""Noise schedule, forward diffusion, weighted training loss, and samplers.

The schedule is computed once in float64 and treated as immutable.  The
training loss draws per-sample timesteps and offset noise, runs the
conditioned denoiser, and applies min-SNR weighting.  Sampling walks an
evenly spaced timestep subsequence with DDIM (eta=0 deterministic) or
ancestral DDPM steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .guidance import conditioned_denoise, guidance_forward

SCALED_LINEAR = "scaled_linear"
LINEAR = "linear"


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    num_timesteps: int
    kind: str
    beta_start: float
    beta_end: float


@dataclass
class LossConfig:
    snr_gamma: float = 5.0
    noise_offset: float = 0.05

    def __post_init__(self):
        if self.snr_gamma <= 0:
            raise ValueError("snr_gamma must be positive")
        if self.noise_offset < 0:
            raise ValueError("noise_offset must be non-negative")


def make_schedule(
    beta_start: float = 0.00085,
    beta_end: float = 0.012,
    num_timesteps: int = 1000,
    kind: str = SCALED_LINEAR,
) -> NoiseSchedule:
    """Build the beta schedule and cumulative alpha products.

    scaled_linear interpolates in sqrt-beta space:
        beta_t = (sqrt(beta_start) + (t / (N-1)) * (sqrt(beta_end) - sqrt(beta_start)))^2
    Endpoints are pinned to beta_start / beta_end exactly.
    """
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError("beta bounds must lie in (0, 1)")
    if num_timesteps < 1:
        raise ValueError("num_timesteps must be >= 1")
    if num_timesteps > 1 and beta_start >= beta_end:
        raise ValueError("beta_start must be below beta_end")
    if kind == SCALED_LINEAR:
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), num_timesteps) ** 2
    elif kind == LINEAR:
        betas = np.linspace(beta_start, beta_end, num_timesteps)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas[0] = beta_start
    if num_timesteps > 1:
        betas[-1] = beta_end
    alphas = 1.0 - betas
    return NoiseSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=np.cumprod(alphas),
        num_timesteps=num_timesteps,
        kind=kind,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def _check_t(schedule: NoiseSchedule, t) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.num_timesteps):
        raise ValueError(f"timestep out of range [0, {schedule.num_timesteps})")
    return t


def _gather(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Per-sample schedule constants broadcast over latent dimensions."""
    arr = np.asarray(values)[np.asarray(t)]
    out = torch.as_tensor(arr, dtype=like.dtype, device=like.device)
    while out.ndim < like.ndim:
        out = out.unsqueeze(-1)
    return out


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward diffusion: z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    t = _check_t(schedule, t)
    ab = schedule.alpha_bars
    return _gather(np.sqrt(ab), t, z0) * z0 + _gather(np.sqrt(1.0 - ab), t, z0) * eps


def snr(schedule: NoiseSchedule, t):
    """Signal-to-noise ratio ab_t / (1 - ab_t)."""
    t = _check_t(schedule, t)
    ab = schedule.alpha_bars[t]
    return ab / (1.0 - ab)


def loss_weight(schedule: NoiseSchedule, t, gamma: float):
    """Min-SNR weighting for noise-prediction losses: min(snr, gamma) / snr."""
    s = snr(schedule, t)
    return np.minimum(s, gamma) / s


def apply_noise_offset(
    eps: torch.Tensor, strength: float, rng: torch.Generator
) -> torch.Tensor:
    """Add one N(0,1) scalar per (sample, channel), broadcast spatially."""
    if strength == 0.0:
        return eps
    g = torch.randn(
        eps.shape[0], eps.shape[1], generator=rng, dtype=eps.dtype, device=eps.device
    )
    return eps + strength * g[:, :, None, None]


@dataclass
class PreparedBatch:
    """Per-sample tensors a training step consumes.

    semantic/identity token streams are None when the context mode drops
    them; with both absent the projection falls back to its null tokens.
    """

    z0: torch.Tensor  # (B, C, h, w)
    fused: torch.Tensor  # (B, 3C, h, w)
    semantic: torch.Tensor | None  # (B, Ts, ds)
    identity: torch.Tensor | None  # (B, Ti, di)

    @property
    def batch_size(self) -> int:
        return self.z0.shape[0]

    def select(self, indices) -> "PreparedBatch":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return PreparedBatch(
            z0=self.z0[idx],
            fused=self.fused[idx],
            semantic=None if self.semantic is None else self.semantic[idx],
            identity=None if self.identity is None else self.identity[idx],
        )


def batch_context(projection, batch: PreparedBatch) -> torch.Tensor:
    if batch.semantic is None and batch.identity is None:
        return projection.forward_null(batch.batch_size)
    return projection(batch.semantic, batch.identity)


def training_loss_given_noise(
    diffusion_net,
    guidance_net,
    projection,
    batch: PreparedBatch,
    schedule: NoiseSchedule,
    loss_cfg: LossConfig,
    t: torch.Tensor,
    eps: torch.Tensor,
    denoise_fn=None,
) -> torch.Tensor:
    """Weighted noise-prediction loss for explicit (t, eps) draws.

    `denoise_fn(z_t, t, context) -> eps_hat` overrides the conditioned
    denoiser when given (used by oracle tests).
    """
    t_np = t.detach().cpu().numpy()
    z_t = q_sample(batch.z0, t_np, eps, schedule)
    context = batch_context(projection, batch)
    if denoise_fn is None:
        eps_hat = conditioned_denoise(
            diffusion_net, guidance_net, z_t, t, batch.fused, context
        )
    else:
        eps_hat = denoise_fn(z_t, t, context)
    w = torch.as_tensor(
        loss_weight(schedule, t_np, loss_cfg.snr_gamma), dtype=z_t.dtype
    )
    per_sample = ((eps - eps_hat) ** 2).mean(dim=(1, 2, 3))
    return (w * per_sample).mean()


def training_loss(
    diffusion_net,
    guidance_net,
    projection,
    batch: PreparedBatch,
    schedule: NoiseSchedule,
    loss_cfg: LossConfig,
    rng: torch.Generator,
    denoise_fn=None,
) -> torch.Tensor:
    """Draw (t, eps) for the batch and compute the weighted loss."""
    b = batch.batch_size
    t = torch.randint(0, schedule.num_timesteps, (b,), generator=rng)
    eps = torch.randn(batch.z0.shape, generator=rng, dtype=batch.z0.dtype)
    eps = apply_noise_offset(eps, loss_cfg.noise_offset, rng)
    return training_loss_given_noise(
        diffusion_net, guidance_net, projection, batch, schedule, loss_cfg,
        t, eps, denoise_fn=denoise_fn,
    )


def ddim_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """One DDIM update from timestep t to t_prev (t_prev = -1 lands on z0)."""
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be below t ({t})")
    _check_t(schedule, t)
    ab_t = float(schedule.alpha_bars[t])
    ab_prev = 1.0 if t_prev < 0 else float(schedule.alpha_bars[t_prev])
    x0 = (z_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(
        1.0 - ab_t / ab_prev
    )
    out = math.sqrt(ab_prev) * x0 + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat
    if sigma > 0.0:
        if rng is None:
            raise ValueError("eta > 0 requires an rng")
        out = out + sigma * torch.randn(
            z_t.shape, generator=rng, dtype=z_t.dtype, device=z_t.device
        )
    return out


def ddpm_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Ancestral step: posterior mean plus beta-tilde noise (none at t=0)."""
    _check_t(schedule, t)
    beta_t = float(schedule.betas[t])
    alpha_t = float(schedule.alphas[t])
    ab_t = float(schedule.alpha_bars[t])
    mean = (z_t - beta_t / math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(alpha_t)
    if t == 0:
        return mean
    ab_prev = float(schedule.alpha_bars[t - 1])
    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
    if rng is None:
        raise ValueError("ddpm_step requires an rng for t > 0")
    return mean + math.sqrt(var) * torch.randn(
        z_t.shape, generator=rng, dtype=z_t.dtype, device=z_t.device
    )


def ddpm_posterior_mean(
    z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, schedule: NoiseSchedule
) -> torch.Tensor:
    beta_t = float(schedule.betas[t])
    ab_t = float(schedule.alpha_bars[t])
    return (z_t - beta_t / math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(
        float(schedule.alphas[t])
    )


def timestep_subsequence(num_timesteps: int, steps: int) -> list[int]:
    """Evenly spaced descending timesteps; uniform stride, rounded down."""
    if not (1 <= steps <= num_timesteps):
        raise ValueError("steps must be in [1, num_timesteps]")
    return [num_timesteps - 1 - (i * num_timesteps) // steps for i in range(steps)]


def sample_latents(
    denoise_fn,
    shape: tuple[int, ...],
    schedule: NoiseSchedule,
    steps: int = 20,
    eta: float = 0.0,
    rng: torch.Generator | None = None,
    dtype=torch.float32,
) -> torch.Tensor:
    """DDIM sampling loop over the timestep subsequence, down to z0.

    denoise_fn(z_t, t) -> eps_hat.  rng seeds the initial z_T and any
    eta > 0 noise.
    """
    if rng is None:
        rng = torch.Generator().manual_seed(0)
    z = torch.randn(shape, generator=rng, dtype=dtype)
    ts = timestep_subsequence(schedule.num_timesteps, steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        eps_hat = denoise_fn(z, t)
        z = ddim_step(z, eps_hat, t, t_prev, schedule, eta=eta, rng=rng)
    return z


def sample(
    diffusion_net,
    guidance_net,
    codec,
    fused: torch.Tensor,
    context: torch.Tensor,
    schedule: NoiseSchedule,
    steps: int = 20,
    eta: float = 0.0,
    seed: int = 0,
    guidance_time_conditioning: bool = True,
) -> np.ndarray:
    """Generate one image from noise under fused conditionals and context.

    Guidance features are recomputed at every step unless
    guidance_time_conditioning is off, in which case they are computed once
    at t=0 and cached.  The decoded image is clamped to [0, 1].
    """
    cfg = diffusion_net.config
    shape = (1, cfg.in_channels, cfg.sample_size, cfg.sample_size)
    rng = torch.Generator().manual_seed(int(seed))
    dtype = next(diffusion_net.parameters()).dtype

    cached = None
    if not guidance_time_conditioning:
        cached = guidance_forward(guidance_net, fused, 0, context)

    def denoise_fn(z_t, t):
        with torch.no_grad():
            return conditioned_denoise(
                diffusion_net, guidance_net, z_t, t, fused, context,
                cached_features=cached,
            )

    z0 = sample_latents(denoise_fn, shape, schedule, steps, eta, rng, dtype=dtype)
    latent = z0[0].permute(1, 2, 0).double().numpy()
    return np.clip(codec.decode(latent), 0.0, 1.0)
