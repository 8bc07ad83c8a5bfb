import dataclasses

import numpy as np
import pytest

from facerig.identity import IdentityEncoder, SemanticEncoder
from facerig.metrics import (
    feature_stats,
    frechet_between_sets,
    frechet_distance,
    identity_consistency,
    identity_similarity,
    mask_bbox,
    masked_rmse,
    rigging_error,
    semantic_feature_fn,
    ssim,
    ssim_foreground,
)
from facerig.morphable import build_procedural_model, render_conditionals


@pytest.fixture(scope="module")
def model():
    return build_procedural_model(seed=3, v_target=162)


def lit_params(model, seed=0):
    rng = np.random.default_rng(seed)
    p = model.zero_params()
    p.shape = rng.uniform(-1.2, 1.2, model.n_shape)
    p.albedo = rng.uniform(-1.2, 1.2, model.n_alb)
    p.pose[:3] = rng.uniform(-0.25, 0.25, 3)
    p.lighting[0] = 1.1
    p.lighting[2] = 0.2
    return p


# --- ssim -----------------------------------------------------------------------


def test_ssim_self_is_one():
    img = np.random.default_rng(0).random((32, 32, 3))
    assert abs(ssim(img, img) - 1.0) < 1e-9


def test_ssim_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


def test_ssim_of_inverted_binary_image_is_negative():
    rng = np.random.default_rng(2)
    img = (rng.random((32, 32)) > 0.5).astype(np.float64)
    assert ssim(img, 1.0 - img) < 0.0


def test_ssim_constant_shift_invariance_for_equal_mean_pairs():
    # same-mean image pairs keep the luminance term at 1 where it matters;
    # a small common shift then moves SSIM by < 1e-6
    rng = np.random.default_rng(3)
    base = 0.4 + 0.2 * rng.random((32, 32))
    other = base + 1e-3 * (rng.random((32, 32)) - 0.5)
    before = ssim(base, other)
    after = ssim(base + 0.1, other + 0.1)
    assert abs(before - after) < 1e-6


def test_ssim_detects_structural_difference():
    rng = np.random.default_rng(4)
    img = rng.random((32, 32, 3))
    noisy = np.clip(img + 0.3 * rng.standard_normal(img.shape), 0, 1)
    assert ssim(img, noisy) < 0.9


def test_ssim_validates_inputs():
    with pytest.raises(ValueError):
        ssim(np.zeros((32, 32)), np.zeros((16, 16)))
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))  # smaller than the window


# --- feature stats ------------------------------------------------------------------


def test_identical_rows_give_zero_covariance():
    feats = np.tile([1.0, 2.0, 3.0], (5, 1))
    mean, cov = feature_stats(feats)
    assert np.allclose(mean, [1, 2, 3])
    assert np.allclose(cov, 0.0)


def test_two_point_set_mean_and_variance():
    mean, cov = feature_stats(np.array([[0.0], [2.0]]))
    assert mean[0] == 1.0
    assert cov[0, 0] == 2.0  # unbiased: ((0-1)^2 + (2-1)^2) / 1


def test_feature_stats_row_permutation_invariant():
    rng = np.random.default_rng(5)
    feats = rng.random((10, 4))
    m1, c1 = feature_stats(feats)
    m2, c2 = feature_stats(feats[::-1])
    assert np.allclose(m1, m2) and np.allclose(c1, c2)


def test_feature_stats_requires_two_rows():
    with pytest.raises(ValueError):
        feature_stats(np.ones((1, 3)))


# --- frechet -------------------------------------------------------------------------


def test_frechet_identical_stats_is_zero():
    rng = np.random.default_rng(6)
    feats = rng.random((20, 5))
    mu, cov = feature_stats(feats)
    assert frechet_distance(mu, cov, mu, cov) < 1e-6


def test_frechet_one_dimensional_closed_form():
    mu1, s1 = 0.3, 0.8
    mu2, s2 = -0.9, 1.7
    got = frechet_distance(
        np.array([mu1]), np.array([[s1**2]]), np.array([mu2]), np.array([[s2**2]])
    )
    expected = (mu1 - mu2) ** 2 + (s1 - s2) ** 2
    assert abs(got - expected) < 1e-9


def test_frechet_commuting_diagonal_closed_form():
    d1 = np.array([1.0, 4.0, 0.25])
    d2 = np.array([2.0, 1.0, 1.0])
    mu1 = np.zeros(3)
    mu2 = np.array([1.0, -1.0, 0.5])
    got = frechet_distance(mu1, np.diag(d1), mu2, np.diag(d2))
    expected = ((mu1 - mu2) ** 2).sum() + np.sum(d1 + d2 - 2 * np.sqrt(d1 * d2))
    assert abs(got - expected) < 1e-9


def test_frechet_nonnegative_on_random_spd():
    rng = np.random.default_rng(7)
    for _ in range(5):
        a = rng.standard_normal((6, 6))
        b = rng.standard_normal((6, 6))
        assert frechet_distance(
            rng.standard_normal(6), a @ a.T + 1e-3 * np.eye(6),
            rng.standard_normal(6), b @ b.T + 1e-3 * np.eye(6),
        ) >= 0.0


def test_frechet_rejects_asymmetric_covariance():
    bad = np.array([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError):
        frechet_distance(np.zeros(2), bad, np.zeros(2), np.eye(2))


def test_frechet_between_sets_uses_feature_fn():
    sem = SemanticEncoder(out_dim=16, seed=1)
    rng = np.random.default_rng(8)
    set_a = [rng.random((32, 32, 3)) for _ in range(6)]
    set_b = [rng.random((32, 32, 3)) * 0.2 for _ in range(6)]
    fn = semantic_feature_fn(sem)
    same = frechet_between_sets(set_a, set_a, fn)
    different = frechet_between_sets(set_a, set_b, fn)
    assert same < 1e-6
    assert different > same


# --- rigging error ------------------------------------------------------------------------


def test_exact_render_has_zero_error(model):
    p = lit_params(model, seed=1)
    gt = render_conditionals(model, p, 32, identity_seed=7)
    err = rigging_error(gt.image, p, model, identity_seed=7)
    assert err["masked_rmse"] == 0.0
    assert err["landmark_rmse_px"] == 0.0
    assert err["ssim_fg"] > 1.0 - 1e-9


def test_pose_offset_render_recovers_analytic_landmark_displacement(model):
    from facerig.metrics import screen_to_pixels
    from facerig.morphable import project_landmarks

    p = lit_params(model, seed=2)
    shifted = dataclasses.replace(p, pose=p.pose.copy())
    shifted.pose[0] += 0.1  # a grid point of the default pose grid
    generated = render_conditionals(model, shifted, 32, identity_seed=3).image
    err = rigging_error(generated, p, model, identity_seed=3)
    lm_a = screen_to_pixels(project_landmarks(model, p), 32)
    lm_b = screen_to_pixels(project_landmarks(model, shifted), 32)
    expected = float(np.sqrt(((lm_a - lm_b) ** 2).sum(axis=1).mean()))
    assert abs(err["landmark_rmse_px"] - expected) < 1e-9


def test_black_image_rmse_equals_foreground_rms(model):
    p = lit_params(model, seed=4)
    gt = render_conditionals(model, p, 32, identity_seed=5)
    err = rigging_error(np.zeros((32, 32, 3)), p, model, identity_seed=5)
    expected = float(np.sqrt((gt.image[gt.mask] ** 2).mean()))
    assert abs(err["masked_rmse"] - expected) < 1e-12


def test_landmark_error_increases_monotonically_with_pose_offset(model):
    p = lit_params(model, seed=6)
    errors = []
    for delta in (0.0, 0.05, 0.1, 0.15, 0.2):
        shifted = dataclasses.replace(p, pose=p.pose.copy())
        shifted.pose[1] += delta
        generated = render_conditionals(model, shifted, 32, identity_seed=6).image
        err = rigging_error(generated, p, model, identity_seed=6,
                            pose_grid=(-0.2, -0.15, -0.1, -0.05, 0.0, 0.05, 0.1, 0.15, 0.2))
        errors.append(err["landmark_rmse_px"])
    assert all(b >= a for a, b in zip(errors, errors[1:]))
    assert errors[-1] > errors[0]


def test_mask_bbox_and_masked_rmse_basics():
    mask = np.zeros((16, 16), dtype=bool)
    mask[4:8, 6:12] = True
    assert mask_bbox(mask) == (4, 8, 6, 12)
    a = np.zeros((16, 16))
    b = np.ones((16, 16))
    assert masked_rmse(a, b, mask) == 1.0
    with pytest.raises(ValueError):
        mask_bbox(np.zeros((4, 4), dtype=bool))


def test_ssim_foreground_crops_to_bbox(model):
    p = lit_params(model, seed=8)
    gt = render_conditionals(model, p, 32, identity_seed=8)
    assert ssim_foreground(gt.image, gt.image, gt.mask) > 1.0 - 1e-9


# --- identity consistency ---------------------------------------------------------------------


def test_identical_images_have_unit_consistency(model):
    enc = IdentityEncoder(out_dim=32, seed=102)
    p = lit_params(model, seed=9)
    maps = render_conditionals(model, p, 32, identity_seed=9)
    value = identity_consistency([maps.image, maps.image], [maps.mask, maps.mask], enc)
    assert abs(value - 1.0) < 1e-12


def test_similarity_symmetric_in_pair_order(model):
    enc = IdentityEncoder(out_dim=32, seed=102)
    a = render_conditionals(model, lit_params(model, 10), 32, identity_seed=1)
    b = render_conditionals(model, lit_params(model, 11), 32, identity_seed=2)
    s1 = identity_similarity(a.image, a.mask, b.image, b.mask, enc)
    s2 = identity_similarity(b.image, b.mask, a.image, a.mask, enc)
    assert abs(s1 - s2) < 1e-12


def test_same_identity_beats_cross_identity_in_most_pairs(model):
    # pairs sampled with the dataset's default variation ranges
    enc = IdentityEncoder(out_dim=32, seed=102)
    rng = np.random.default_rng(12)

    def render(identity_seed, shape, albedo, variation_seed):
        vr = np.random.default_rng(variation_seed)
        p = model.zero_params()
        p.shape = shape
        p.albedo = albedo
        p.pose[:3] = vr.uniform(-0.3, 0.3, 3)
        p.pose[3:] = vr.uniform(-0.3, 0.3, 3 * model.n_joint)
        p.expression = vr.uniform(-1.0, 1.0, model.n_expr)
        p.lighting[0] = vr.uniform(0.9, 1.35) + vr.uniform(-0.04, 0.04, 3)
        p.lighting[1:] = (vr.uniform(-0.28, 0.28, 8)[:, None]
                          + vr.uniform(-0.04, 0.04, (8, 3)))
        return render_conditionals(model, p, 32, identity_seed)

    wins = 0
    n = 100
    for trial in range(n):
        sa = rng.uniform(-1.8, 1.8, model.n_shape)
        aa = rng.uniform(-2.5, 2.5, model.n_alb)
        sb = rng.uniform(-1.8, 1.8, model.n_shape)
        ab = rng.uniform(-2.5, 2.5, model.n_alb)
        r1 = render(trial, sa, aa, 3 * trial)
        r2 = render(trial, sa, aa, 3 * trial + 1)
        r3 = render(5000 + trial, sb, ab, 3 * trial + 2)
        same = identity_similarity(r1.image, r1.mask, r2.image, r2.mask, enc)
        cross = identity_similarity(r1.image, r1.mask, r3.image, r3.mask, enc)
        wins += same > cross
    assert wins >= 90, f"same-identity similarity won only {wins}/100 pairs"


def test_identity_consistency_requires_two_images(model):
    enc = IdentityEncoder(out_dim=32, seed=102)
    with pytest.raises(ValueError):
        identity_consistency([np.zeros((32, 32, 3))], [np.ones((32, 32), dtype=bool)], enc)
