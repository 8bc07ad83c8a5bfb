"""Command-line entry points: synth, train, finetune, edit, eval.

Every command is deterministic given (config, seed), writes a run manifest
recording the resolved configuration, and uses exit codes 0 (success),
1 (internal failure), 2 (invalid input or config).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .config import PipelineConfig, load_config, profile_config
from .dataset import FaceDataset, SampleRecord, manifest_hash, save_image, synth_dataset
from .diffusion import sample as sample_image
from .metrics import (
    frechet_between_sets,
    identity_consistency,
    rigging_error,
    semantic_feature_fn,
)
from .morphable import (
    CameraParams,
    FaceParams,
    build_procedural_model,
    default_camera_scale,
    render_conditionals,
)
from .pipeline import Pipeline
from .training import (
    FreezePolicy,
    STAGE2_DEFAULT_POLICY,
    finetune_stage2,
    optimizer_state_from_arrays,
    save_training_checkpoint,
    train_stage1,
)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INVALID = 2


def _write_run_manifest(path: Path, command: str, config: PipelineConfig, args: dict) -> None:
    manifest = {
        "command": command,
        "config": config.to_dict(),
        "args": {k: v for k, v in args.items() if isinstance(v, (str, int, float, bool, list, type(None)))},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1))


def _build_model(config: PipelineConfig):
    r = config.render
    return build_procedural_model(
        seed=r.model_seed,
        v_target=r.v_target,
        n_shape=r.n_shape,
        n_expr=r.n_expr,
        n_alb=r.n_alb,
        n_joint=r.n_joint,
    )


def _resolve_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return profile_config(getattr(args, "profile", "toy"))


# -- synth ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    config = _resolve_config(args)
    if args.seed is not None:
        config.dataset.master_seed = args.seed
    model = _build_model(config)
    out = Path(args.out)
    synth_dataset(config.dataset, model, out, config.render.resolution)
    _write_run_manifest(out / "run_manifest.json", "synth", config, vars(args))
    print(f"dataset written to {out} (manifest sha256 {manifest_hash(out)[:16]})")
    return EXIT_OK


# -- train ---------------------------------------------------------------------


def cmd_train(args) -> int:
    dataset = FaceDataset.load(args.data)
    if args.resume:
        pipeline, arrays, metadata = Pipeline.from_checkpoint(args.resume)
        start_step = int(metadata["rng"]["global_step"])
        seed = int(metadata["rng"]["train_seed"])
        optimizer_state = optimizer_state_from_arrays(arrays)
        prior_losses = list(arrays.get("trainer/loss_history", np.empty(0)))
    else:
        config = _resolve_config(args)
        pipeline = Pipeline.build(config)
        images = [
            dataset.load_maps(r).image
            for r in dataset.train_records[: min(64, len(dataset.train_records))]
        ]
        pipeline.codec.calibrate_scale(images)
        start_step = 0
        seed = args.seed if args.seed is not None else pipeline.config.train.seed
        optimizer_state = None
        prior_losses = []
    steps = args.steps if args.steps is not None else pipeline.config.train.steps

    result = train_stage1(
        pipeline,
        dataset,
        steps=steps,
        seed=seed,
        start_step=start_step,
        optimizer_state=optimizer_state,
    )
    losses = prior_losses + result.loss_history
    result.loss_history = losses

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_training_checkpoint(
        pipeline, out, result=result, stage="stage1", train_seed=seed
    )
    loss_log = out.with_suffix(out.suffix + ".loss.txt")
    loss_log.write_text(
        "".join(f"{i} {v:.8f}\n" for i, v in enumerate(losses))
    )
    _write_run_manifest(
        out.with_suffix(out.suffix + ".run.json"), "train", pipeline.config, vars(args)
    )
    final = f", final loss {losses[-1]:.5f}" if losses else ""
    print(f"stage-1 checkpoint at {out} ({result.global_step} steps{final})")
    return EXIT_OK


# -- finetune --------------------------------------------------------------------


def _parse_policy(args) -> FreezePolicy:
    components = frozenset(
        args.train_components.split(",") if args.train_components else
        STAGE2_DEFAULT_POLICY.components
    )
    blocks = frozenset(args.freeze_blocks.split(",")) if args.freeze_blocks else None
    layers = frozenset(args.freeze_layers.split(",")) if args.freeze_layers else None
    return FreezePolicy(components=components, blocks=blocks, layers=layers)


def cmd_finetune(args) -> int:
    pipeline, _, metadata = Pipeline.from_checkpoint(args.ckpt)
    model = _build_model(pipeline.config)
    resolution = pipeline.config.render.resolution

    if args.identity is not None:
        dataset = FaceDataset.load(args.data)
        recs = [r for r in dataset.records_for(args.identity) if r.variation == args.variation]
        if not recs:
            raise ValueError(f"identity {args.identity} has no variation {args.variation}")
        record = recs[0]
        maps = dataset.load_maps(record)
        inference_params = record.params
        identity_seed = record.identity_seed
        source = record.record_id
    elif args.image and args.params:
        from .dataset import load_image

        image = load_image(args.image)
        inference_params = _load_params_file(args.params, model)
        identity_seed = args.identity_seed
        rendered = render_conditionals(model, inference_params, resolution, identity_seed)
        maps = dataclasses.replace(rendered, image=image)
        source = str(args.image)
    else:
        raise ValueError("finetune needs --identity with --data, or --image with --params")

    policy = _parse_policy(args)
    result = finetune_stage2(
        pipeline,
        maps,
        policy=policy,
        steps=args.steps,
        copies=args.copies,
        seed=args.seed,
        override_stage2_contract=args.override_stage2_contract,
    )

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_training_checkpoint(
        pipeline,
        out,
        result=result,
        stage="stage2",
        train_seed=args.seed if args.seed is not None else pipeline.config.finetune.seed,
        policy=policy,
        extra_arrays={
            "finetune/inference_image": maps.image.astype(np.float64),
            "finetune/inference_mask": maps.mask.astype(np.uint8),
        },
        extra_metadata={
            "finetune_source": source,
            "finetune_identity": args.identity,
            "finetune_identity_seed": int(identity_seed),
            "inference_params": inference_params.to_flat_dict(),
        },
    )
    _write_run_manifest(
        out.with_suffix(out.suffix + ".run.json"), "finetune", pipeline.config, vars(args)
    )
    first = result.loss_history[0] if result.loss_history else float("nan")
    last = result.loss_history[-1] if result.loss_history else float("nan")
    print(f"stage-2 checkpoint at {out} (loss {first:.5f} -> {last:.5f})")
    return EXIT_OK


# -- edit ------------------------------------------------------------------------


def _load_params_file(path, model, base: FaceParams | None = None) -> FaceParams:
    """Flat text record of named coefficient lists -> FaceParams.

    Missing keys fall back to `base` (or zeros / the default camera).
    """
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"params file {path} must hold a mapping")
    if base is None:
        base = model.zero_params()
        base.lighting[0] = 1.1  # visible flat lighting by default
    d = base.to_flat_dict()
    for key in ("shape", "expression", "pose", "albedo", "lighting", "camera"):
        if key in raw:
            d[key] = [float(v) for v in np.asarray(raw[key], dtype=np.float64).reshape(-1)]
    params = FaceParams.from_flat_dict(d)
    params.validate(model)
    return params


def _context_from_checkpoint(pipeline, arrays):
    if "finetune/inference_image" not in arrays:
        return None
    image = np.asarray(arrays["finetune/inference_image"], dtype=np.float64)
    mask = np.asarray(arrays["finetune/inference_mask"]).astype(bool)
    return pipeline.context_for(image, mask)


def cmd_edit(args) -> int:
    pipeline, arrays, metadata = Pipeline.from_checkpoint(args.ckpt)
    model = _build_model(pipeline.config)
    resolution = pipeline.config.render.resolution

    record: SampleRecord | None = None
    if args.sample is not None:
        dataset = FaceDataset.load(args.data)
        record = dataset.find(args.sample)
        base = record.params
        identity_seed = record.identity_seed
    else:
        base = None
        identity_seed = args.identity_seed
    if args.params:
        params = _load_params_file(args.params, model, base=base)
    elif base is not None:
        params = base
    else:
        raise ValueError("edit needs --params or --sample")

    maps = render_conditionals(model, params, resolution, identity_seed)
    fused = pipeline.fused_tensor(maps)

    context = _context_from_checkpoint(pipeline, arrays)
    if context is None and record is not None:
        dataset_maps = FaceDataset.load(args.data).load_maps(record)
        context = pipeline.context_for(dataset_maps.image, dataset_maps.mask)
    if context is None:
        raise ValueError(
            "checkpoint has no fine-tuned inference image; pass --sample with --data "
            "to provide a context image"
        )

    with torch.no_grad():
        image = sample_image(
            pipeline.diffusion_net,
            pipeline.guidance_net,
            pipeline.codec,
            fused,
            context,
            pipeline.schedule,
            steps=args.steps,
            eta=args.eta,
            seed=args.seed,
            guidance_time_conditioning=pipeline.config.guidance_time_conditioning,
        )

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(image, out)
    if args.grid:
        panels = [maps.albedo_map, maps.normal_map, maps.render_map, image, maps.image]
        grid = np.concatenate(panels, axis=1)
        save_image(grid, args.grid)
    _write_run_manifest(
        out.with_suffix(out.suffix + ".run.json"), "edit", pipeline.config, vars(args)
    )
    print(f"generated image at {out}")
    return EXIT_OK


# -- eval ------------------------------------------------------------------------


def cmd_eval(args) -> int:
    pipeline, arrays, metadata = Pipeline.from_checkpoint(args.ckpt)
    model = _build_model(pipeline.config)
    dataset = FaceDataset.load(args.data)
    identity = metadata.get("finetune_identity")
    if identity is None:
        raise ValueError("eval needs a fine-tuned checkpoint (run finetune first)")
    records = [r for r in dataset.split(args.split) if r.identity == identity]
    if not records:
        raise ValueError(f"split {args.split!r} holds no records for identity {identity}")
    context = _context_from_checkpoint(pipeline, arrays)
    if context is None:
        raise ValueError("checkpoint lacks the fine-tuned inference image")

    import torch

    per_record = []
    generated_images = []
    gt_images = []
    for i, record in enumerate(records):
        maps = dataset.load_maps(record)
        fused = pipeline.fused_tensor(maps)
        with torch.no_grad():
            image = sample_image(
                pipeline.diffusion_net,
                pipeline.guidance_net,
                pipeline.codec,
                fused,
                context,
                pipeline.schedule,
                steps=args.steps,
                eta=0.0,
                seed=args.seed + i,
                guidance_time_conditioning=pipeline.config.guidance_time_conditioning,
            )
        err = rigging_error(image, record.params, model, record.identity_seed)
        err["record"] = record.record_id
        per_record.append(err)
        generated_images.append(image)
        gt_images.append(maps.image)

    masks = [dataset.load_maps(r).mask for r in records]
    report = {
        "identity": identity,
        "n_records": len(records),
        "ssim_fg": float(np.mean([e["ssim_fg"] for e in per_record])),
        "masked_rmse": float(np.mean([e["masked_rmse"] for e in per_record])),
        "landmark_rmse_px": float(np.mean([e["landmark_rmse_px"] for e in per_record])),
        "identity_consistency": identity_consistency(
            generated_images, masks, pipeline.identity_encoder
        ),
        "frechet": frechet_between_sets(
            generated_images, gt_images, semantic_feature_fn(pipeline.semantic_encoder)
        ),
        "per_record": per_record,
    }

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, sort_keys=True, indent=1))
    text_path = out.with_suffix(".txt")
    lines = [
        f"{key} {report[key]}"
        for key in (
            "identity", "n_records", "ssim_fg", "masked_rmse",
            "landmark_rmse_px", "identity_consistency", "frechet",
        )
    ]
    text_path.write_text("\n".join(lines) + "\n")
    _write_run_manifest(
        out.with_suffix(out.suffix + ".run.json"), "eval", pipeline.config, vars(args)
    )
    print("\n".join(lines))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facerig",
        description="Identity-preserving facial attribute editing pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the mesh model and synthetic dataset")
    p.add_argument("--config", help="YAML config file (profile + overrides)")
    p.add_argument("--profile", default="toy", help="profile when no config file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override dataset master seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="stage-1 conditional training")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--profile", default="toy")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="stage-2 single-image fine-tuning")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--identity", type=int, default=None)
    p.add_argument("--variation", type=int, default=0)
    p.add_argument("--image", default=None, help="inference image file")
    p.add_argument("--params", default=None, help="params file for the image")
    p.add_argument("--identity-seed", type=int, default=0, dest="identity_seed")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None, help="default 50")
    p.add_argument("--copies", type=int, default=None, help="default 8")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument(
        "--train-components", default=None,
        help="comma list among diffusion,projection,guidance (default diffusion,projection)",
    )
    p.add_argument(
        "--freeze-blocks", default=None,
        help="restrict fine-tuning to these UNet blocks (down,mid,up), freezing the rest",
    )
    p.add_argument(
        "--freeze-layers", default=None,
        help="restrict fine-tuning to these layer kinds (residual,self_attn,cross_attn)",
    )
    p.add_argument("--override-stage2-contract", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("edit", help="render conditionals for params and sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--params", default=None, help="params file (flat coefficient lists)")
    p.add_argument("--sample", default=None, help="dataset record id, e.g. id0060_v03")
    p.add_argument("--identity-seed", type=int, default=0, dest="identity_seed")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default=None, help="also write a side-by-side panel image")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="metrics over a split for a fine-tuned identity")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="held_out")
    p.add_argument("--out", required=True, help="JSON report path (a .txt twin is written)")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INVALID if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # pragma: no cover - internal failure path
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
