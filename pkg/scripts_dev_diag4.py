"""Does a larger stage-1 batch at ~3000 steps make generation follow
conditioning and reproduce backgrounds?"""
import dataclasses
import tempfile
import time

import numpy as np
import torch

torch.set_num_threads(2)

from facerig.config import toy_profile
from facerig.dataset import synth_dataset
from facerig.diffusion import sample as sample_image
from facerig.metrics import ssim_foreground
from facerig.morphable import build_procedural_model, render_conditionals
from facerig.pipeline import Pipeline
from facerig.training import finetune_stage2, train_stage1

cfg = toy_profile()
cfg.dataset.n_identities = 48
cfg.dataset.variations_per_identity = 8
model = build_procedural_model(cfg.render.model_seed, cfg.render.v_target,
                               cfg.render.n_shape, cfg.render.n_expr,
                               cfg.render.n_alb, cfg.render.n_joint)
tmp = tempfile.mkdtemp()
ds = synth_dataset(cfg.dataset, model, tmp, cfg.render.resolution)
pipe = Pipeline.build(cfg)
pipe.codec.calibrate_scale([ds.load_maps(r).image for r in ds.train_records[:64]])

t0 = time.time()
res = train_stage1(pipe, ds, steps=2800, batch_size=16, seed=11)
h = res.loss_history
print(f"stage1 2800x16 in {time.time()-t0:.0f}s loss {np.mean(h[:10]):.3f} -> "
      f"{np.mean(h[-20:]):.4f}", flush=True)

held_ids = sorted({r.identity for r in ds.held_out_records})[:2]
state = pipe.named_arrays()
wins = bg_ok = trials = 0
for ident in held_ids:
    recs = [r for r in ds.held_out_records if r.identity == ident]
    inference = ds.load_maps(recs[0])
    ft = finetune_stage2(pipe, inference, steps=50, copies=8, seed=3)
    print(f"id{ident} ft loss {ft.loss_history[0]:.4f} -> {ft.loss_history[-1]:.4f}",
          flush=True)
    context = pipe.context_for(inference.image, inference.mask)
    for k, rec in enumerate(recs):
        tm = ds.load_maps(rec)
        fused = pipe.fused_tensor(tm)
        with torch.no_grad():
            gen = sample_image(pipe.diffusion_net, pipe.guidance_net, pipe.codec,
                               fused, context, pipe.schedule, steps=20, seed=100 + k)
        gt = ds.regenerate_maps(rec)
        other = recs[(k + 1) % len(recs)]
        mm = render_conditionals(
            model, dataclasses.replace(rec.params, pose=other.params.pose),
            32, rec.identity_seed)
        s_match = ssim_foreground(gen, gt.image, gt.mask)
        s_mm = ssim_foreground(gen, mm.image, mm.mask)
        union = gt.mask | inference.mask
        rmse_bg = float(np.sqrt((((gen - inference.image) ** 2)[~union]).mean()))
        rmse_fg = float(np.sqrt((((gen - gt.image) ** 2)[gt.mask]).mean()))
        wins += s_match > s_mm
        bg_ok += rmse_bg <= 0.15
        trials += 1
        print(f"  id{ident} v{k}: match {s_match:.3f} mm {s_mm:.3f} "
              f"fg {rmse_fg:.3f} bg {rmse_bg:.3f}", flush=True)
    pipe.load_arrays(state)
print(f"TOTAL wins {wins}/{trials} bg_ok {bg_ok}/{trials}", flush=True)
