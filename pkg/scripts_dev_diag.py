"""Diagnose generation quality: reconstruction from partial noise vs full
generation, effect of more steps, and what stage-2 memorization does."""
import tempfile
import time

import numpy as np
import torch

torch.set_num_threads(2)

from facerig.config import toy_profile
from facerig.dataset import synth_dataset
from facerig.diffusion import (
    ddim_step,
    q_sample,
    sample as sample_image,
    timestep_subsequence,
)
from facerig.guidance import conditioned_denoise
from facerig.pipeline import Pipeline
from facerig.morphable import build_procedural_model
from facerig.training import finetune_stage2, train_stage1

cfg = toy_profile()
cfg.dataset.n_identities = 20
cfg.dataset.variations_per_identity = 6
model = build_procedural_model(cfg.render.model_seed, cfg.render.v_target,
                               cfg.render.n_shape, cfg.render.n_expr,
                               cfg.render.n_alb, cfg.render.n_joint)
tmp = tempfile.mkdtemp()
ds = synth_dataset(cfg.dataset, model, tmp, cfg.render.resolution)
pipe = Pipeline.build(cfg)
pipe.codec.calibrate_scale([ds.load_maps(r).image for r in ds.train_records[:48]])

t0 = time.time()
res = train_stage1(pipe, ds, steps=1200, seed=11)
print(f"stage1 1200 in {time.time()-t0:.0f}s, loss -> {np.mean(res.loss_history[-20:]):.4f}",
      flush=True)

held = ds.held_out_records
rec = held[0]
maps = ds.load_maps(rec)
fused = pipe.fused_tensor(maps)
context = pipe.context_for(maps.image, maps.mask)
z0_true = torch.from_numpy(
    np.moveaxis(pipe.codec.encode(maps.image).astype(np.float32), -1, 0)
)[None]


def decode(z):
    img = pipe.codec.decode(z[0].permute(1, 2, 0).double().numpy())
    return np.clip(img, 0, 1)


def report(tag, img):
    fg = maps.mask
    bg = ~maps.mask
    rmse_fg = np.sqrt((((img - maps.image) ** 2)[fg]).mean())
    rmse_bg = np.sqrt((((img - maps.image) ** 2)[bg]).mean())
    print(f"{tag}: rmse_fg {rmse_fg:.3f} rmse_bg {rmse_bg:.3f}", flush=True)


# A) reconstruction from partial noise at several t
for t_start in (200, 500, 800):
    g = torch.Generator().manual_seed(0)
    eps = torch.randn(z0_true.shape, generator=g)
    z = q_sample(z0_true, t_start, eps, pipe.schedule)
    ts = [t for t in timestep_subsequence(pipe.schedule.num_timesteps, 25) if t <= t_start]
    with torch.no_grad():
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else -1
            eh = conditioned_denoise(pipe.diffusion_net, pipe.guidance_net, z, t, fused, context)
            z = ddim_step(z, eh, t, t_prev, pipe.schedule)
    report(f"recon from t={t_start}", decode(z))

# B) full generation, 20 vs 100 steps
for steps in (20, 100):
    with torch.no_grad():
        img = sample_image(pipe.diffusion_net, pipe.guidance_net, pipe.codec,
                           fused, context, pipe.schedule, steps=steps, seed=5)
    report(f"generation {steps} steps", img)

# C) single eps-hat accuracy at several t (cosine + relative error)
g = torch.Generator().manual_seed(1)
for t in (100, 400, 700, 950):
    eps = torch.randn(z0_true.shape, generator=g)
    z = q_sample(z0_true, t, eps, pipe.schedule)
    with torch.no_grad():
        eh = conditioned_denoise(pipe.diffusion_net, pipe.guidance_net, z, t, fused, context)
    cos = torch.nn.functional.cosine_similarity(eh.reshape(-1), eps.reshape(-1), dim=0)
    ab = pipe.schedule.alpha_bars[t]
    x0_hat = (z - np.sqrt(1 - ab) * eh) / np.sqrt(ab)
    x0_err = (x0_hat - z0_true).abs().mean()
    print(f"t={t}: cos(eps) {float(cos):.4f} x0_mae {float(x0_err):.3f}", flush=True)

# D) stage-2 longer memorization then generation
t0 = time.time()
ft = finetune_stage2(pipe, maps, steps=200, copies=8, seed=3)
print(f"stage2 200x8 in {time.time()-t0:.0f}s loss {ft.loss_history[0]:.4f} -> "
      f"{np.mean(ft.loss_history[-10:]):.4f}", flush=True)
for steps in (20, 100):
    with torch.no_grad():
        img = sample_image(pipe.diffusion_net, pipe.guidance_net, pipe.codec,
                           fused, context, pipe.schedule, steps=steps, seed=5)
    report(f"post-ft generation {steps}", img)
