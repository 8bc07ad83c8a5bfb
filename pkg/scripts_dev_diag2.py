"""Verify the DDIM loop with an oracle denoiser, then probe stage-2
memorization strength vs learning rate."""
import tempfile
import time

import numpy as np
import torch

torch.set_num_threads(2)

from facerig.config import toy_profile
from facerig.dataset import synth_dataset
from facerig.diffusion import sample as sample_image, sample_latents
from facerig.optim import OptimizerConfig
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

rec = ds.held_out_records[0]
maps = ds.load_maps(rec)
z0_true = torch.from_numpy(
    np.moveaxis(pipe.codec.encode(maps.image).astype(np.float32), -1, 0)
)[None]

# A) oracle denoiser: knows z0 exactly
ab = pipe.schedule.alpha_bars


def oracle(z_t, t):
    return (z_t - np.sqrt(ab[t]) * z0_true) / np.sqrt(1 - ab[t])


z_end = sample_latents(oracle, z0_true.shape, pipe.schedule, steps=20, eta=0.0,
                       rng=torch.Generator().manual_seed(0))
print("oracle DDIM-20 max err vs z0:", float((z_end - z0_true).abs().max()), flush=True)

# B) stage-2 memorization from a *trained* stage-1 model at various lr
t0 = time.time()
base_state = None
train_stage1(pipe, ds, steps=1200, seed=11)
print(f"stage1 1200 in {time.time()-t0:.0f}s", flush=True)
base_state = pipe.named_arrays()

context = pipe.context_for(maps.image, maps.mask)
fused = pipe.fused_tensor(maps)


def bg_fg_rmse(img):
    fg = maps.mask
    return (float(np.sqrt((((img - maps.image) ** 2)[fg]).mean())),
            float(np.sqrt((((img - maps.image) ** 2)[~fg]).mean())))


for lr in (4e-4, 1e-3, 2e-3):
    pipe.load_arrays(base_state)
    ft = finetune_stage2(pipe, maps, steps=50, copies=8, seed=3,
                         opt_cfg=OptimizerConfig(learning_rate=lr))
    with torch.no_grad():
        img = sample_image(pipe.diffusion_net, pipe.guidance_net, pipe.codec,
                           fused, context, pipe.schedule, steps=20, seed=5)
    fg, bg = bg_fg_rmse(img)
    print(f"ft lr={lr}: loss {ft.loss_history[0]:.4f}->{np.mean(ft.loss_history[-5:]):.4f} "
          f"gen rmse_fg {fg:.3f} rmse_bg {bg:.3f}", flush=True)
