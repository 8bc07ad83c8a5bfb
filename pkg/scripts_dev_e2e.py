"""Dev experiment: calibrate toy-profile learning rates and check the
end-to-end rig-following / background-retention / overfit behaviors."""
import dataclasses
import tempfile
import time

import numpy as np
import torch

torch.set_num_threads(2)

from facerig.config import toy_profile
from facerig.dataset import synth_dataset
from facerig.diffusion import sample as sample_image
from facerig.metrics import mask_bbox, ssim_foreground
from facerig.morphable import build_procedural_model, render_conditionals
from facerig.pipeline import Pipeline
from facerig.training import finetune_stage2, train_stage1

cfg = toy_profile()
cfg.dataset.n_identities = 20
cfg.dataset.variations_per_identity = 6
model = build_procedural_model(
    cfg.render.model_seed, cfg.render.v_target, cfg.render.n_shape,
    cfg.render.n_expr, cfg.render.n_alb, cfg.render.n_joint,
)
tmp = tempfile.mkdtemp()
ds = synth_dataset(cfg.dataset, model, tmp, cfg.render.resolution)
print("train/held:", len(ds.train_records), len(ds.held_out_records), flush=True)

pipe = Pipeline.build(cfg)
imgs = [ds.load_maps(r).image for r in ds.train_records[:48]]
pipe.codec.calibrate_scale(imgs)

t0 = time.time()
res = train_stage1(pipe, ds, steps=1500, seed=11)
h = res.loss_history
print(f"stage1 1500 steps in {time.time()-t0:.0f}s; loss first10 {np.mean(h[:10]):.4f} "
      f"last20 {np.mean(h[-20:]):.4f}", flush=True)

# --- criterion-11 style overfit from FRESH pipeline -------------------------
held = ds.held_out_records
fresh_ratios = []
for seed in range(2):
    fresh = Pipeline.build(toy_profile())
    fresh.codec.config.scale_factor = pipe.codec.scale_factor
    maps0 = ds.load_maps(held[0])
    r2 = finetune_stage2(fresh, maps0, steps=200, seed=seed)
    hh = r2.loss_history
    ratio = np.median(hh[-10:]) / np.median(hh[:10])
    fresh_ratios.append(ratio)
    print(f"fresh overfit seed {seed}: first10 {np.median(hh[:10]):.4f} "
          f"last10 {np.median(hh[-10:]):.4f} ratio {ratio:.3f}", flush=True)

# --- stage-2 on trained ckpt + rig check -------------------------------------
ident = held[0].identity
recs = [r for r in held if r.identity == ident]
state0 = pipe.named_arrays()

inference = ds.load_maps(recs[0])
t0 = time.time()
ft = finetune_stage2(pipe, inference, steps=50, copies=8, seed=3)
print(f"stage2 50x8 in {time.time()-t0:.0f}s loss {ft.loss_history[0]:.4f} -> "
      f"{ft.loss_history[-1]:.4f}", flush=True)

context = pipe.context_for(inference.image, inference.mask)
wins = 0
bg_ok = 0
trials = 0
t0 = time.time()
for k, rec in enumerate(recs):
    target_maps = ds.load_maps(rec)
    fused = pipe.fused_tensor(target_maps)
    with torch.no_grad():
        gen = sample_image(pipe.diffusion_net, pipe.guidance_net, pipe.codec,
                           fused, context, pipe.schedule, steps=20, eta=0.0, seed=100 + k)
    gt = ds.regenerate_maps(rec)
    # mismatched pose: pose from the next record
    other = recs[(k + 1) % len(recs)]
    mm_params = dataclasses.replace(rec.params, pose=other.params.pose)
    mm = render_conditionals(model, mm_params, 32, rec.identity_seed)
    s_match = ssim_foreground(gen, gt.image, gt.mask)
    s_mm = ssim_foreground(gen, mm.image, mm.mask)
    wins += s_match > s_mm
    # background retention outside union of masks
    union = gt.mask | inference.mask
    outside = ~union
    if outside.any():
        rmse = np.sqrt((((gen - inference.image) ** 2)[outside]).mean())
        bg_ok += rmse <= 0.15
        print(f"  rec {rec.record_id}: match {s_match:.3f} mm {s_mm:.3f} bg_rmse {rmse:.3f}",
              flush=True)
    trials += 1
print(f"rig wins {wins}/{trials}, bg ok {bg_ok}/{trials}, sampling {time.time()-t0:.0f}s",
      flush=True)
