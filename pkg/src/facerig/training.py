"""Two-stage training orchestration with freeze policies.

Stage 1 trains the diffusion net, guidance net, and projection module over
the synthetic dataset.  Stage 2 fine-tunes on a single sample replicated
into a batch, with the guidance net (and codec) frozen under the default
policy.  Per-step RNG streams are keyed by (seed, step[, replica]), so a
resumed run replays the exact same trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import (
    LossConfig,
    PreparedBatch,
    apply_noise_offset,
    training_loss_given_noise,
)
from .morphable import ConditionalMaps
from .optim import AdamW, OptimizerConfig
from .pipeline import COMPONENTS, Pipeline

BLOCKS = ("down", "mid", "up")
LAYER_KINDS = ("residual", "self_attn", "cross_attn")


def derive_seed(*parts: int) -> int:
    """Deterministic int64 seed from a tuple of non-negative ints."""
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass(frozen=True)
class FreezePolicy:
    """Selects trainable parameters by component, block, and layer kind.

    A UNet parameter is trainable iff its component is listed and its
    (block, layer_kind) tag passes both filters; `None` means no filter.
    Block/layer filters do not constrain non-UNet components (projection).
    """

    components: frozenset = frozenset({"diffusion", "projection"})
    blocks: frozenset | None = None
    layers: frozenset | None = None

    def __post_init__(self):
        unknown = set(self.components) - set(COMPONENTS)
        if unknown:
            raise ValueError(f"unknown components {sorted(unknown)}")
        if self.blocks is not None and set(self.blocks) - set(BLOCKS):
            raise ValueError(f"blocks must be a subset of {BLOCKS}")
        if self.layers is not None and set(self.layers) - set(LAYER_KINDS):
            raise ValueError(f"layers must be a subset of {LAYER_KINDS}")

    def admits(self, component: str, tag=None) -> bool:
        if component not in self.components:
            return False
        if tag is None:
            return True
        if self.blocks is not None and tag.block not in self.blocks:
            return False
        if self.layers is not None and tag.layer_kind not in self.layers:
            # "other" layers (convs, resamples, time embed) train only when
            # no layer filter is active.
            return False
        return True


STAGE1_POLICY = FreezePolicy(components=frozenset(COMPONENTS))
STAGE2_DEFAULT_POLICY = FreezePolicy(components=frozenset({"diffusion", "projection"}))


def trainable_parameters(
    pipeline: Pipeline, policy: FreezePolicy
) -> dict[str, torch.Tensor]:
    """Prefixed {component/name: parameter} map the policy admits."""
    selected: dict[str, torch.Tensor] = {}
    for component in COMPONENTS:
        if component not in policy.components:
            continue
        net = {
            "diffusion": pipeline.diffusion_net,
            "guidance": pipeline.guidance_net,
            "projection": pipeline.projection,
        }[component]
        for name, p in net.named_parameters():
            tag = net.param_tag(name) if component != "projection" else None
            if policy.admits(component, tag):
                selected[f"{component}/{name}"] = p
    return selected


def set_trainable(pipeline: Pipeline, selected: dict[str, torch.Tensor]) -> None:
    """Enable requires_grad only on the selected set.

    Freezing a module's parameters does not block gradients flowing through
    its activations, so e.g. the projection still receives gradients routed
    through a frozen guidance net.
    """
    for component in COMPONENTS:
        for name, p in pipeline.component_parameters(component).items():
            p.requires_grad_(f"{component}/{name}" in selected)


@dataclass
class TrainResult:
    loss_history: list[float]
    optimizer: AdamW
    trainable_names: list[str]
    global_step: int
    grad_norms: list[float] = field(default_factory=list)


def _draw_step_noise(
    batch: PreparedBatch,
    schedule,
    loss_cfg: LossConfig,
    seed: int,
    step: int,
    per_replica: bool,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(t, eps) for one step; per_replica keys each batch row separately."""
    shape = batch.z0.shape
    if per_replica:
        ts, epss = [], []
        for replica in range(shape[0]):
            g = torch.Generator().manual_seed(derive_seed(seed, step, replica))
            ts.append(torch.randint(0, schedule.num_timesteps, (1,), generator=g))
            eps = torch.randn((1, *shape[1:]), generator=g, dtype=batch.z0.dtype)
            epss.append(apply_noise_offset(eps, loss_cfg.noise_offset, g))
        return torch.cat(ts), torch.cat(epss)
    g = torch.Generator().manual_seed(derive_seed(seed, step))
    t = torch.randint(0, schedule.num_timesteps, (shape[0],), generator=g)
    eps = torch.randn(shape, generator=g, dtype=batch.z0.dtype)
    return t, apply_noise_offset(eps, loss_cfg.noise_offset, g)


def _run_steps(
    pipeline: Pipeline,
    batch_for_step,
    policy: FreezePolicy,
    opt_cfg: OptimizerConfig,
    steps: int,
    seed: int,
    start_step: int = 0,
    optimizer: AdamW | None = None,
    per_replica_noise: bool = False,
) -> TrainResult:
    selected = trainable_parameters(pipeline, policy)
    set_trainable(pipeline, selected)
    if optimizer is None:
        optimizer = AdamW(selected, opt_cfg)
    loss_cfg = pipeline.config.loss
    result = TrainResult([], optimizer, sorted(selected), start_step)
    for step in range(start_step, steps):
        batch = batch_for_step(step)
        t, eps = _draw_step_noise(
            batch, pipeline.schedule, loss_cfg, seed, step, per_replica_noise
        )
        optimizer.zero_grad()
        loss = training_loss_given_noise(
            pipeline.diffusion_net,
            pipeline.guidance_net,
            pipeline.projection,
            batch,
            pipeline.schedule,
            loss_cfg,
            t,
            eps,
        )
        loss.backward()
        result.grad_norms.append(optimizer.step())
        result.loss_history.append(float(loss.detach()))
        result.global_step = step + 1
    for component in COMPONENTS:
        for p in pipeline.component_parameters(component).values():
            p.requires_grad_(True)
    return result


def prepare_training_cache(pipeline: Pipeline, dataset, records) -> PreparedBatch:
    """Precompute frozen-path tensors for a record list (stage-1 cache)."""
    prepared = [pipeline.prepare_sample(dataset.load_maps(r)) for r in records]
    return pipeline.collate(prepared)


def train_stage1(
    pipeline: Pipeline,
    dataset,
    steps: int | None = None,
    batch_size: int | None = None,
    seed: int | None = None,
    opt_cfg: OptimizerConfig | None = None,
    start_step: int = 0,
    optimizer_state: dict[str, np.ndarray] | None = None,
    cache: PreparedBatch | None = None,
    progress=None,
) -> TrainResult:
    """Dataset-wide conditional training of diffusion + guidance + projection.

    Codec and encoders stay untouched (they hold no torch parameters).
    Deterministic for a given (seed, config, dataset); resuming from
    (start_step, optimizer_state) replays the uninterrupted trajectory.
    """
    cfg = pipeline.config
    steps = cfg.train.steps if steps is None else steps
    batch_size = cfg.train.batch_size if batch_size is None else batch_size
    seed = cfg.train.seed if seed is None else seed
    if opt_cfg is None:
        opt_cfg = _stage_opt_cfg(pipeline, cfg.train.learning_rate)
    records = dataset.train_records
    if not records:
        raise ValueError("dataset has no training records")
    if cache is None:
        cache = prepare_training_cache(pipeline, dataset, records)

    def batch_for_step(step: int) -> PreparedBatch:
        rng = np.random.default_rng(np.random.SeedSequence([seed, step, 7]))
        idx = rng.integers(0, len(records), size=batch_size)
        if progress is not None:
            progress(step)
        return cache.select(idx)

    optimizer = None
    if optimizer_state is not None:
        selected = trainable_parameters(pipeline, STAGE1_POLICY)
        optimizer = AdamW(selected, opt_cfg)
        optimizer.load_state_arrays(optimizer_state)
    return _run_steps(
        pipeline, batch_for_step, STAGE1_POLICY, opt_cfg, steps, seed,
        start_step=start_step, optimizer=optimizer,
    )


def finetune_stage2(
    pipeline: Pipeline,
    maps: ConditionalMaps,
    policy: FreezePolicy | None = None,
    steps: int | None = None,
    copies: int | None = None,
    seed: int | None = None,
    opt_cfg: OptimizerConfig | None = None,
    override_stage2_contract: bool = False,
    start_step: int = 0,
    optimizer_state: dict[str, np.ndarray] | None = None,
) -> TrainResult:
    """Single-image fine-tuning: a batch of copies with fresh noise each.

    The guidance net stays frozen; selecting it in the policy is rejected
    unless override_stage2_contract is set.  Each replica draws its own
    (t, eps) per step so the copies average gradient noise.
    """
    cfg = pipeline.config
    policy = STAGE2_DEFAULT_POLICY if policy is None else policy
    if "guidance" in policy.components and not override_stage2_contract:
        raise ValueError(
            "stage-2 fine-tuning keeps the guidance net frozen; "
            "pass override_stage2_contract to train it anyway"
        )
    steps = cfg.finetune.steps if steps is None else steps
    copies = cfg.finetune.copies if copies is None else copies
    seed = cfg.finetune.seed if seed is None else seed
    if opt_cfg is None:
        opt_cfg = _stage_opt_cfg(pipeline, cfg.finetune.learning_rate)

    prepared = pipeline.prepare_sample(maps)
    single = pipeline.collate([prepared])
    batch = PreparedBatch(
        z0=single.z0.repeat(copies, 1, 1, 1),
        fused=single.fused.repeat(copies, 1, 1, 1),
        semantic=None if single.semantic is None else single.semantic.repeat(copies, 1, 1),
        identity=None if single.identity is None else single.identity.repeat(copies, 1, 1),
    )

    optimizer = None
    if optimizer_state is not None:
        selected = trainable_parameters(pipeline, policy)
        optimizer = AdamW(selected, opt_cfg)
        optimizer.load_state_arrays(optimizer_state)
    return _run_steps(
        pipeline, lambda step: batch, policy, opt_cfg, steps, seed,
        start_step=start_step, optimizer=optimizer, per_replica_noise=True,
    )


def _stage_opt_cfg(pipeline: Pipeline, lr_override: float | None) -> OptimizerConfig:
    base = pipeline.config.optimizer
    if lr_override is None:
        return base
    import dataclasses as _dc

    return _dc.replace(base, learning_rate=lr_override)


# -- checkpoint wrappers -------------------------------------------------------


def save_training_checkpoint(
    pipeline: Pipeline,
    path,
    result: TrainResult | None = None,
    stage: str = "stage1",
    train_seed: int | None = None,
    policy: FreezePolicy | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
    extra_metadata: dict | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    metadata: dict = {"stage": stage}
    if result is not None:
        arrays["trainer/loss_history"] = np.asarray(result.loss_history, dtype=np.float64)
        for key, arr in result.optimizer.state_arrays().items():
            arrays[f"optim/{key}"] = arr
        metadata["rng"] = {"train_seed": train_seed, "global_step": result.global_step}
        metadata["trainable_names"] = result.trainable_names
    if policy is not None:
        metadata["policy"] = {
            "components": sorted(policy.components),
            "blocks": None if policy.blocks is None else sorted(policy.blocks),
            "layers": None if policy.layers is None else sorted(policy.layers),
        }
    if extra_arrays:
        arrays.update(extra_arrays)
    if extra_metadata:
        metadata.update(extra_metadata)
    pipeline.save(path, extra_arrays=arrays, extra_metadata=metadata)


def optimizer_state_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {
        key[len("optim/"):]: arr
        for key, arr in arrays.items()
        if key.startswith("optim/")
    }
