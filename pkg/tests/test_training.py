import numpy as np
import pytest
import torch

from facerig.checkpoint import FORMAT_VERSION, MAGIC, load_checkpoint, save_checkpoint
from facerig.config import toy_profile
from facerig.dataset import FaceDataset, load_image, manifest_hash, synth_dataset
from facerig.morphable import build_procedural_model
from facerig.optim import AdamW, OptimizerConfig
from facerig.pipeline import Pipeline
from facerig.training import (
    FreezePolicy,
    STAGE2_DEFAULT_POLICY,
    finetune_stage2,
    optimizer_state_from_arrays,
    save_training_checkpoint,
    train_stage1,
    trainable_parameters,
)

torch.set_num_threads(2)


def tiny_config():
    cfg = toy_profile()
    cfg.render.v_target = 42
    cfg.dataset.n_identities = 4
    cfg.dataset.variations_per_identity = 2
    cfg.train.steps = 2
    cfg.train.batch_size = 2
    return cfg


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    cfg = tiny_config()
    model = build_procedural_model(
        cfg.render.model_seed, cfg.render.v_target, cfg.render.n_shape,
        cfg.render.n_expr, cfg.render.n_alb, cfg.render.n_joint,
    )
    root = tmp_path_factory.mktemp("ds")
    dataset = synth_dataset(cfg.dataset, model, root, cfg.render.resolution)
    return cfg, model, dataset, root


def fresh_pipeline(cfg):
    pipe = Pipeline.build(toy_profile())
    pipe.config.render = cfg.render
    pipe.config.dataset = cfg.dataset
    pipe.config.train = cfg.train
    return pipe


def changed_keys(before: dict, after: dict) -> set:
    return {
        k for k in before
        if not np.array_equal(before[k], after[k])
    }


# --- dataset synthesis ----------------------------------------------------------


def test_synth_counts_and_ids(workspace):
    cfg, model, dataset, root = workspace
    assert len(dataset.records) == 8
    assert dataset.identities() == [0, 1, 2, 3]
    assert len(dataset.train_records) == 8  # 4 identities -> 0 held out
    assert manifest_hash(root) == manifest_hash(root)


def test_synth_held_out_split(tmp_path):
    cfg = tiny_config()
    cfg.dataset.n_identities = 12
    cfg.dataset.variations_per_identity = 1
    model = build_procedural_model(cfg.render.model_seed, cfg.render.v_target)
    ds = synth_dataset(cfg.dataset, model, tmp_path, cfg.render.resolution)
    held = ds.identities("held_out")
    assert held == [11]  # last 10% (rounded down) of identities
    assert ds.identities("train") == list(range(11))


def test_regeneration_reproduces_stored_images_bitwise(workspace):
    cfg, model, dataset, root = workspace
    from facerig.dataset import quantize

    for record in dataset.records[:3]:
        regen = dataset.regenerate_maps(record)
        stored = dataset.load_maps(record)
        assert np.array_equal(quantize(regen.image), quantize(stored.image * 1.0))
        assert np.array_equal(regen.mask, stored.mask)
        assert np.array_equal(quantize(regen.albedo_map), quantize(stored.albedo_map))


def test_same_identity_shares_albedo_but_not_render(workspace):
    cfg, model, dataset, root = workspace
    a, b = dataset.records_for(0)[:2]
    assert np.array_equal(a.params.shape, b.params.shape)
    assert np.array_equal(a.params.albedo, b.params.albedo)
    assert not np.array_equal(a.params.pose, b.params.pose)
    ma, mb = dataset.load_maps(a), dataset.load_maps(b)
    assert not np.array_equal(ma.render_map, mb.render_map)


def test_rerun_same_seed_identical_manifest(tmp_path, workspace):
    cfg, model, dataset, root = workspace
    again = tmp_path / "again"
    synth_dataset(cfg.dataset, model, again, cfg.render.resolution)
    assert (again / "manifest.json").read_bytes() == (root / "manifest.json").read_bytes()


def test_find_record_by_id(workspace):
    cfg, model, dataset, root = workspace
    rec = dataset.find("id0001_v01")
    assert rec.identity == 1 and rec.variation == 1
    with pytest.raises(ValueError):
        dataset.find("id9999_v00")


# --- freeze policies ------------------------------------------------------------------


def test_policy_validation():
    with pytest.raises(ValueError):
        FreezePolicy(components=frozenset({"vae"}))
    with pytest.raises(ValueError):
        FreezePolicy(components=frozenset({"diffusion"}), blocks=frozenset({"side"}))
    with pytest.raises(ValueError):
        FreezePolicy(components=frozenset({"diffusion"}), layers=frozenset({"conv"}))


def test_trainable_parameter_selection(workspace):
    cfg, *_ = workspace
    pipe = fresh_pipeline(cfg)
    policy = FreezePolicy(
        components=frozenset({"diffusion"}),
        blocks=frozenset({"up"}),
        layers=frozenset({"residual"}),
    )
    names = trainable_parameters(pipe, policy)
    assert names
    for key in names:
        assert key.startswith("diffusion/up.")
        assert ".res." in key
    # projection passes block/layer filters vacuously
    with_proj = trainable_parameters(
        pipe,
        FreezePolicy(components=frozenset({"diffusion", "projection"}),
                     blocks=frozenset({"up"}), layers=frozenset({"residual"})),
    )
    assert any(k.startswith("projection/") for k in with_proj)


# --- stage 1 -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def stage1_run(workspace):
    cfg, model, dataset, root = workspace
    pipe = fresh_pipeline(cfg)
    pipe.codec.calibrate_scale([dataset.load_maps(r).image for r in dataset.train_records])
    before = pipe.snapshot()
    result = train_stage1(pipe, dataset, steps=2, batch_size=2, seed=5)
    return cfg, dataset, pipe, before, result


def test_stage1_changes_every_component(stage1_run):
    cfg, dataset, pipe, before, result = stage1_run
    after = pipe.snapshot()
    changed = changed_keys(before, after)
    assert any(k.startswith("diffusion/") for k in changed)
    assert any(k.startswith("guidance/") for k in changed)
    assert any(k.startswith("projection/") for k in changed)


def test_stage1_leaves_codec_bitwise_unchanged(stage1_run):
    cfg, dataset, pipe, before, result = stage1_run
    after = pipe.snapshot()
    for key in before:
        if key.startswith("codec/"):
            assert np.array_equal(before[key], after[key]), key


def test_stage1_changes_only_selected_components(stage1_run):
    cfg, dataset, pipe, before, result = stage1_run
    after = pipe.snapshot()
    allowed = ("diffusion/", "guidance/", "projection/")
    for key in changed_keys(before, after):
        assert key.startswith(allowed), key


def test_stage1_deterministic_loss_series(workspace, stage1_run):
    cfg, model, dataset, root = workspace
    _, _, _, _, first = stage1_run
    pipe = fresh_pipeline(cfg)
    pipe.codec.calibrate_scale([dataset.load_maps(r).image for r in dataset.train_records])
    again = train_stage1(pipe, dataset, steps=2, batch_size=2, seed=5)
    assert again.loss_history == first.loss_history


def test_stage1_rejects_empty_dataset(workspace):
    cfg, model, dataset, root = workspace

    class Empty:
        train_records = []

    pipe = fresh_pipeline(cfg)
    with pytest.raises(ValueError):
        train_stage1(pipe, Empty(), steps=1)


# --- stage 2 ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def stage2_setup(workspace):
    cfg, model, dataset, root = workspace
    pipe = fresh_pipeline(cfg)
    pipe.codec.calibrate_scale([dataset.load_maps(r).image for r in dataset.train_records])
    train_stage1(pipe, dataset, steps=1, batch_size=2, seed=5)
    maps = dataset.load_maps(dataset.records[0])
    return cfg, pipe, maps


def test_stage2_default_policy_freezes_guidance_and_codec(stage2_setup):
    cfg, pipe, maps = stage2_setup
    before = pipe.snapshot()
    finetune_stage2(pipe, maps, steps=2, copies=3, seed=1)
    after = pipe.snapshot()
    changed = changed_keys(before, after)
    assert changed
    for key in changed:
        assert key.startswith(("diffusion/", "projection/")), key
    for key in before:
        if key.startswith(("guidance/", "codec/")):
            assert np.array_equal(before[key], after[key]), key


def test_stage2_block_layer_policy_restricts_updates(stage2_setup):
    cfg, pipe, maps = stage2_setup
    policy = FreezePolicy(
        components=frozenset({"diffusion"}),
        blocks=frozenset({"up"}),
        layers=frozenset({"residual"}),
    )
    before = pipe.snapshot()
    finetune_stage2(pipe, maps, policy=policy, steps=2, copies=2, seed=2)
    changed = changed_keys(before, pipe.snapshot())
    assert changed
    tags = pipe.param_tags()
    for key in changed:
        assert tags[key] == ("up", "residual"), key


def test_stage2_zero_steps_is_identity(stage2_setup):
    cfg, pipe, maps = stage2_setup
    before = pipe.snapshot()
    finetune_stage2(pipe, maps, steps=0, copies=2, seed=3)
    assert changed_keys(before, pipe.snapshot()) == set()


def test_stage2_rejects_guidance_without_override(stage2_setup):
    cfg, pipe, maps = stage2_setup
    policy = FreezePolicy(components=frozenset({"diffusion", "guidance"}))
    with pytest.raises(ValueError):
        finetune_stage2(pipe, maps, policy=policy, steps=1)
    before = pipe.snapshot()
    finetune_stage2(pipe, maps, policy=policy, steps=1, copies=2, seed=4,
                    override_stage2_contract=True)
    changed = changed_keys(before, pipe.snapshot())
    assert any(k.startswith("guidance/") for k in changed)


def test_stage2_replicas_draw_fresh_noise(stage2_setup):
    # replicas see different (t, eps): with shared noise the per-replica
    # losses would be identical and so would the batch gradient twice over
    from facerig.training import _draw_step_noise
    from facerig.diffusion import PreparedBatch

    cfg, pipe, maps = stage2_setup
    prepared = pipe.collate([pipe.prepare_sample(maps)])
    batch = PreparedBatch(
        z0=prepared.z0.repeat(4, 1, 1, 1),
        fused=prepared.fused.repeat(4, 1, 1, 1),
        semantic=prepared.semantic.repeat(4, 1, 1),
        identity=prepared.identity.repeat(4, 1, 1),
    )
    t, eps = _draw_step_noise(batch, pipe.schedule, cfg.loss, seed=9, step=0,
                              per_replica=True)
    assert len(set(t.tolist())) > 1 or not torch.equal(eps[0], eps[1])
    t2, eps2 = _draw_step_noise(batch, pipe.schedule, cfg.loss, seed=9, step=0,
                                per_replica=True)
    assert torch.equal(t, t2) and torch.equal(eps, eps2)


# --- optimizer -----------------------------------------------------------------------------------


def test_adamw_state_roundtrip():
    g = torch.Generator().manual_seed(0)
    params = {"a": torch.randn(4, 3, generator=g, requires_grad=True),
              "b": torch.randn(5, generator=g, requires_grad=True)}
    opt = AdamW(params, OptimizerConfig(learning_rate=1e-3))
    (params["a"].sum() + params["b"].square().sum()).backward()
    opt.step()
    state = opt.state_arrays()
    opt2 = AdamW(params, OptimizerConfig(learning_rate=1e-3))
    opt2.load_state_arrays(state)
    assert opt2.step_count == 1
    assert torch.equal(opt2.exp_avg["a"], opt.exp_avg["a"])


def test_adamw_skips_parameters_without_gradients():
    params = {"a": torch.ones(3, requires_grad=True),
              "frozen": torch.ones(3, requires_grad=True)}
    opt = AdamW(params, OptimizerConfig(learning_rate=1e-2))
    params["a"].sum().backward()
    opt.step()
    assert torch.equal(params["frozen"], torch.ones(3))
    assert not torch.equal(params["a"], torch.ones(3))


def test_gradient_clipping_caps_global_norm():
    params = {"a": torch.zeros(10, requires_grad=True)}
    opt = AdamW(params, OptimizerConfig(learning_rate=1e-3, grad_clip_norm=1.0))
    params["a"].backward(gradient=torch.full((10,), 10.0))
    norm = opt.clip_gradients()
    assert norm > 1.0
    assert abs(float(params["a"].grad.norm()) - 1.0) < 1e-5


# --- checkpoints -----------------------------------------------------------------------------------


def test_checkpoint_roundtrip_bitwise(tmp_path, stage1_run):
    cfg, dataset, pipe, before, result = stage1_run
    path = tmp_path / "ckpt.bin"
    save_training_checkpoint(pipe, path, result=result, stage="stage1", train_seed=5)
    arrays, metadata = load_checkpoint(path)
    for key, arr in pipe.named_arrays().items():
        assert np.array_equal(arrays[key], arr), key
    assert metadata["stage"] == "stage1"
    assert metadata["rng"] == {"train_seed": 5, "global_step": 2}
    assert "diffusion/conv_in.weight" in metadata["param_tags"] or metadata["param_tags"]


def test_checkpoint_restores_into_fresh_pipeline(tmp_path, stage1_run):
    cfg, dataset, pipe, before, result = stage1_run
    path = tmp_path / "ckpt.bin"
    save_training_checkpoint(pipe, path, result=result, stage="stage1", train_seed=5)
    restored, arrays, metadata = Pipeline.from_checkpoint(path)
    for key, arr in pipe.named_arrays().items():
        assert np.array_equal(restored.named_arrays()[key], arr), key
    assert restored.codec.scale_factor == pipe.codec.scale_factor


def test_checkpoint_rejects_corrupted_magic(tmp_path):
    path = tmp_path / "bad.bin"
    save_checkpoint(path, {"codec/x": np.ones(3), "diffusion/x": np.ones(1),
                           "guidance/x": np.ones(1), "projection/x": np.ones(1)}, {})
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_rejects_version_mismatch(tmp_path):
    path = tmp_path / "ver.bin"
    save_checkpoint(path, {"codec/x": np.ones(3), "diffusion/x": np.ones(1),
                           "guidance/x": np.ones(1), "projection/x": np.ones(1)}, {})
    data = bytearray(path.read_bytes())
    data[len(MAGIC)] = FORMAT_VERSION + 1
    path.write_bytes(bytes(data))
    with pytest.raises(ValueError) as err:
        load_checkpoint(path)
    assert str(FORMAT_VERSION) in str(err.value)
    assert str(FORMAT_VERSION + 1) in str(err.value)


def test_checkpoint_rejects_missing_namespace(tmp_path):
    path = tmp_path / "missing.bin"
    save_checkpoint(path, {"codec/x": np.ones(3)}, {})
    with pytest.raises(ValueError, match="namespace"):
        load_checkpoint(path)


def test_resume_reproduces_uninterrupted_loss_series(workspace, tmp_path):
    cfg, model, dataset, root = workspace

    def build():
        pipe = fresh_pipeline(cfg)
        pipe.codec.calibrate_scale(
            [dataset.load_maps(r).image for r in dataset.train_records]
        )
        return pipe

    straight = build()
    full = train_stage1(straight, dataset, steps=4, batch_size=2, seed=21)

    partial_pipe = build()
    part = train_stage1(partial_pipe, dataset, steps=2, batch_size=2, seed=21)
    path = tmp_path / "mid.bin"
    save_training_checkpoint(partial_pipe, path, result=part, stage="stage1", train_seed=21)

    resumed_pipe, arrays, metadata = Pipeline.from_checkpoint(path)
    resumed = train_stage1(
        resumed_pipe,
        dataset,
        steps=4,
        batch_size=2,
        seed=int(metadata["rng"]["train_seed"]),
        start_step=int(metadata["rng"]["global_step"]),
        optimizer_state=optimizer_state_from_arrays(arrays),
    )
    combined = part.loss_history + resumed.loss_history
    assert combined == pytest.approx(full.loss_history, rel=1e-6, abs=1e-7)
    for key, arr in straight.named_arrays().items():
        assert np.allclose(arr, resumed_pipe.named_arrays()[key], atol=1e-6), key
