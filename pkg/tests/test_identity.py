import dataclasses

import numpy as np
import pytest
import torch

from facerig.identity import (
    ContextBuilder,
    IdentityEncoder,
    ProjectionConfig,
    ProjectionModule,
    SemanticEncoder,
    TokenEmbedding,
    ablation_context,
    project,
)
from facerig.morphable import build_procedural_model, render_conditionals

PROJ = ProjectionConfig(depth=2, heads=4, queries=16, output_dim=64,
                        d_semantic=32, d_identity=32, ff_mult=2)


@pytest.fixture(scope="module")
def encoders():
    return SemanticEncoder(out_dim=32, seed=101), IdentityEncoder(out_dim=32, seed=102)


def face_image(seed=0, r=32):
    rng = np.random.default_rng(seed)
    image = rng.random((r, r, 3))
    mask = np.zeros((r, r), dtype=bool)
    mask[6:26, 9:23] = True
    return image, mask


# --- semantic encoder ----------------------------------------------------------


def test_constant_image_gives_equal_tokens_up_to_coordinate_tags(encoders):
    # cell-coordinate features tag each token with its position; the content
    # part (tokens minus those fixed offsets) is uniform for a constant image
    sem, _ = encoders
    tokens = sem.encode(np.full((32, 32, 3), 0.5)).tokens
    assert tokens.shape == (16, 32)
    content = tokens - sem.coordinate_offsets
    assert np.allclose(content, content[0])
    assert not np.allclose(tokens, tokens[0])  # positions do differ


def test_semantic_encoder_deterministic(encoders):
    sem, _ = encoders
    image, _ = face_image(1)
    assert np.array_equal(sem.encode(image).tokens, sem.encode(image).tokens)
    other = SemanticEncoder(out_dim=32, seed=101)
    assert np.array_equal(sem.encode(image).tokens, other.encode(image).tokens)


def test_single_cell_change_touches_exactly_one_token(encoders):
    sem, _ = encoders
    image, _ = face_image(2)
    modified = image.copy()
    modified[8:16, 16:24] += 0.21  # cell (1, 2) of the 4x4 grid
    before = sem.encode(image).tokens
    after = sem.encode(np.clip(modified, 0, 1)).tokens
    changed = [i for i in range(16) if not np.allclose(before[i], after[i])]
    assert changed == [1 * 4 + 2]


def test_semantic_encoder_validates_shape(encoders):
    sem, _ = encoders
    with pytest.raises(ValueError):
        sem.encode(np.zeros((30, 30, 3)))  # not divisible by 4


# --- identity encoder ------------------------------------------------------------


def test_background_changes_leave_identity_tokens_unchanged(encoders):
    _, idt = encoders
    image, mask = face_image(3)
    tokens = idt.encode(image, mask).tokens
    noisy = image.copy()
    noisy[~mask] = np.random.default_rng(9).random(((~mask).sum(), 3))
    assert np.array_equal(idt.encode(noisy, mask).tokens, tokens)
    inside = image.copy()
    inside[10, 12] += 0.2
    assert not np.array_equal(idt.encode(np.clip(inside, 0, 1), mask).tokens, tokens)


def test_empty_mask_is_rejected(encoders):
    _, idt = encoders
    image, _ = face_image(4)
    with pytest.raises(ValueError):
        idt.encode(image, np.zeros((32, 32), dtype=bool))


def test_identity_tokens_shape_and_determinism(encoders):
    _, idt = encoders
    image, mask = face_image(5)
    a = idt.encode(image, mask)
    assert a.tokens.shape == (4, 32)
    assert a.source == "identity"
    assert np.array_equal(a.tokens, idt.encode(image, mask).tokens)


def test_same_identity_scores_higher_than_cross_identity(encoders):
    _, idt = encoders
    model = build_procedural_model(seed=5, v_target=42)
    rng = np.random.default_rng(17)

    def render(identity_seed, shape, albedo, lighting_boost, pose):
        p = model.zero_params()
        p.shape = shape
        p.albedo = albedo
        p.pose[:3] = pose
        p.lighting[0] = 1.0 + lighting_boost
        p.lighting[2] = 0.2 * lighting_boost
        return render_conditionals(model, p, 32, identity_seed)

    def tokens(maps):
        return idt.encode(maps.image, maps.mask).tokens.reshape(-1)

    def cos(u, v):
        return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))

    same, cross = [], []
    for trial in range(50):
        sa = rng.uniform(-1.5, 1.5, model.n_shape)
        aa = rng.uniform(-1.5, 1.5, model.n_alb)
        sb = rng.uniform(-1.5, 1.5, model.n_shape)
        ab = rng.uniform(-1.5, 1.5, model.n_alb)
        pose1, pose2 = rng.uniform(-0.3, 0.3, (2, 3))
        a1 = render(trial, sa, aa, 0.0, pose1)
        a2 = render(trial, sa, aa, 0.3, pose2)
        b = render(1000 + trial, sb, ab, 0.15, pose1)
        same.append(cos(tokens(a1), tokens(a2)))
        cross.append(cos(tokens(a1), tokens(b)))
    assert np.mean(same) > np.mean(cross)


# --- projection module --------------------------------------------------------------


def rand_tokens(batch, count, dim, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(batch, count, dim, generator=g)


def test_projection_output_shape_for_any_token_counts():
    module = ProjectionModule(PROJ, seed=1)
    for t_s, t_i in ((1, 1), (16, 4), (5, 9)):
        out = module(rand_tokens(2, t_s, 32), rand_tokens(2, t_i, 32, seed=1))
        assert out.shape == (2, 16, 64)


def test_projection_deterministic_per_seed():
    a = ProjectionModule(PROJ, seed=3)
    b = ProjectionModule(PROJ, seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)


def test_projection_invariant_to_input_token_permutation():
    module = ProjectionModule(PROJ, seed=2).double()
    sem = rand_tokens(1, 16, 32, seed=4).double()
    idt = rand_tokens(1, 4, 32, seed=5).double()
    base = module(sem, idt)
    perm_s = torch.randperm(16, generator=torch.Generator().manual_seed(0))
    perm_i = torch.randperm(4, generator=torch.Generator().manual_seed(1))
    permuted = module(sem[:, perm_s], idt[:, perm_i])
    assert torch.allclose(base, permuted, atol=1e-6)


def test_projection_width_mismatch_rejected():
    module = ProjectionModule(PROJ, seed=0)
    with pytest.raises(ValueError):
        module(rand_tokens(1, 4, 16), None)
    with pytest.raises(ValueError):
        module(None, rand_tokens(1, 4, 16))


def test_projection_gradients_match_finite_differences():
    module = ProjectionModule(PROJ, seed=7).double()
    sem = rand_tokens(1, 16, 32, seed=8).double()
    idt = rand_tokens(1, 4, 32, seed=9).double()
    weight = torch.randn(1, 16, 64, generator=torch.Generator().manual_seed(10),
                         dtype=torch.float64)

    def loss_fn():
        return (module(sem, idt) * weight).sum()

    for name in ("latents", "blocks.0.0.to_q.weight", "blocks.1.1.fc1.weight",
                 "sem_proj.weight", "id_proj.bias"):
        p = dict(module.named_parameters())[name]
        (analytic,) = torch.autograd.grad(loss_fn(), p)
        flat_indices = torch.argsort(analytic.abs().reshape(-1), descending=True)[:3]
        h = 1e-6
        with torch.no_grad():
            for flat in flat_indices:
                idx = np.unravel_index(int(flat), p.shape)
                orig = p[idx].item()
                p[idx] = orig + h
                up = loss_fn().item()
                p[idx] = orig - h
                down = loss_fn().item()
                p[idx] = orig
                fd = (up - down) / (2 * h)
                ana = analytic[idx].item()
                assert abs(fd - ana) / max(abs(fd), abs(ana), 1e-8) < 1e-4, name


def test_kv_include_latents_knob_changes_output():
    with_latents = ProjectionModule(PROJ, seed=11)
    without = ProjectionModule(
        dataclasses.replace(PROJ, kv_include_latents=False), seed=11
    )
    sem = rand_tokens(1, 16, 32, seed=12)
    assert not torch.allclose(with_latents(sem, None), without(sem, None))


def test_project_wrapper_handles_token_embeddings():
    module = ProjectionModule(PROJ, seed=13)
    sem = TokenEmbedding(np.random.default_rng(0).standard_normal((16, 32)), "semantic")
    idt = TokenEmbedding(np.random.default_rng(1).standard_normal((4, 32)), "identity")
    out = project(sem, idt, module)
    assert out.shape == (1, 16, 64)
    assert project(None, None, module).shape == (1, 16, 64)


# --- ablation modes -------------------------------------------------------------------


def test_ablation_modes_select_streams(encoders):
    sem_enc, id_enc = encoders
    module = ProjectionModule(PROJ, seed=14)
    image, mask = face_image(6)
    outputs = {}
    for mode in ("both", "semantic_only", "identity_only", "none"):
        builder = ablation_context(mode, sem_enc, id_enc, module)
        s, i = builder.encode_streams(image, mask)
        if mode == "both":
            assert s is not None and i is not None
        elif mode == "semantic_only":
            assert s is not None and i is None
        elif mode == "identity_only":
            assert s is None and i is not None
        else:
            assert s is None and i is None
        out = builder.context(image, mask)
        assert out.shape == (1, 16, 64)
        outputs[mode] = out
    assert not torch.allclose(outputs["both"], outputs["semantic_only"])
    assert not torch.allclose(outputs["both"], outputs["none"])


def test_unknown_mode_rejected(encoders):
    sem_enc, id_enc = encoders
    with pytest.raises(ValueError):
        ContextBuilder("all", sem_enc, id_enc, ProjectionModule(PROJ, seed=0))


def test_encoders_expose_no_trainable_parameters(encoders):
    sem, idt = encoders
    assert not isinstance(sem.projection, torch.Tensor)
    assert not hasattr(sem, "parameters")
    assert not hasattr(idt, "parameters")
