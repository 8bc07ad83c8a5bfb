"""Quantitative evaluation: SSIM, Fréchet distance, rigging error, identity
consistency.

The Fréchet machinery takes a pluggable feature function (default: the
frozen semantic encoder, flattened), so distances are exact even though
no pretrained feature extractor is involved.  Rigging error re-estimates
pose by grid search against the renderer and compares landmarks in pixels.
"""

from __future__ import annotations

import dataclasses
from itertools import combinations, product

import numpy as np

from .morphable import (
    FaceParams,
    MeshModel,
    project_landmarks,
    render_conditionals,
)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _windowed_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode Gaussian filtering of a 2-D array."""
    size = len(kernel)
    rows = np.lib.stride_tricks.sliding_window_view(img, size, axis=0)
    rows = rows @ kernel
    cols = np.lib.stride_tricks.sliding_window_view(rows, size, axis=1)
    return cols @ kernel


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 11,
    sigma: float = 1.5,
    data_range: float = 1.0,
) -> float:
    """Single-scale SSIM with a Gaussian window, valid positions only."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"images smaller than the {window}x{window} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    kernel = _gaussian_window(window, sigma)

    values = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x = _windowed_mean(x, kernel)
        mu_y = _windowed_mean(y, kernel)
        xx = _windowed_mean(x * x, kernel) - mu_x**2
        yy = _windowed_mean(y * y, kernel) - mu_y**2
        xy = _windowed_mean(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        values.append(num / den)
    return float(np.mean(values))


def feature_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased covariance of an (M, D) feature matrix."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("need an (M, D) matrix with M >= 2")
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / (features.shape[0] - 1)
    return mean, cov


def frechet_distance(
    mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray,
    symmetry_tol: float = 1e-8,
) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 sqrt(S1 S2)).

    Tr(sqrt(S1 S2)) comes from the eigenvalues of the (generally
    non-symmetric) product, which are non-negative in exact arithmetic;
    small negative values from numerics are clipped at the -1e-8 tolerance
    (relative to the largest eigenvalue).
    """
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    sigma1 = np.asarray(sigma1, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    for s in (sigma1, sigma2):
        if not np.allclose(s, s.T, atol=symmetry_tol, rtol=0):
            raise ValueError("covariance matrix is not symmetric")
    diff = float(((mu1 - mu2) ** 2).sum())
    eig = np.linalg.eigvals(sigma1 @ sigma2)
    eig = eig.real
    floor = -1e-8 * max(1.0, float(eig.max(initial=0.0)))
    if eig.min(initial=0.0) < floor:
        raise ValueError(
            f"product of covariances has a significantly negative eigenvalue "
            f"({eig.min():.3e}); inputs are not valid covariance matrices"
        )
    trace_sqrt = float(np.sqrt(np.clip(eig, 0.0, None)).sum())
    value = diff + float(np.trace(sigma1) + np.trace(sigma2)) - 2.0 * trace_sqrt
    return max(value, 0.0)


def masked_rmse(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    diff = (np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2
    return float(np.sqrt(diff[mask].mean()))


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask")
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def ssim_foreground(generated: np.ndarray, reference: np.ndarray, mask: np.ndarray) -> float:
    """SSIM restricted to the mask's bounding box."""
    r0, r1, c0, c1 = mask_bbox(mask)
    return ssim(generated[r0:r1, c0:c1], reference[r0:r1, c0:c1])


DEFAULT_POSE_GRID = (-0.2, -0.1, 0.0, 0.1, 0.2)


def fit_pose_by_grid(
    generated: np.ndarray,
    target_params: FaceParams,
    model: MeshModel,
    resolution: int,
    grid: tuple[float, ...] = DEFAULT_POSE_GRID,
    identity_seed: int = 0,
) -> FaceParams:
    """Best-matching render over a pose-offset grid around the target pose.

    Offsets from `grid` are applied per global-rotation axis; the candidate
    minimizing foreground RMSE against the generated image wins.  Ties keep
    the earlier candidate in iteration order (deterministic).
    """
    best = None
    best_err = np.inf
    for off in product(grid, repeat=3):
        pose = np.array(target_params.pose, dtype=np.float64)
        pose[:3] = pose[:3] + np.array(off)
        candidate = dataclasses.replace(target_params, pose=pose)
        maps = render_conditionals(model, candidate, resolution, identity_seed)
        if not maps.mask.any():
            continue
        err = masked_rmse(generated, maps.image, maps.mask)
        if err < best_err:
            best_err = err
            best = candidate
    if best is None:
        raise ValueError("no pose candidate produced a visible render")
    return best


def screen_to_pixels(points: np.ndarray, resolution: int) -> np.ndarray:
    """[-1, 1] screen coordinates -> fractional pixel indices."""
    return (np.asarray(points) + 1.0) / 2.0 * resolution - 0.5


def rigging_error(
    generated: np.ndarray,
    target_params: FaceParams,
    model: MeshModel,
    identity_seed: int = 0,
    pose_grid: tuple[float, ...] = DEFAULT_POSE_GRID,
) -> dict[str, float]:
    """How well a generated image realizes the requested parameters.

    masked_rmse compares against the ground-truth render over its mask;
    landmark_rmse_px measures the pixel displacement between the target's
    landmarks and those of the pose re-fitted to the generated image;
    ssim_fg is SSIM over the ground-truth mask bounding box.
    """
    resolution = generated.shape[0]
    gt = render_conditionals(model, target_params, resolution, identity_seed)
    rmse = masked_rmse(generated, gt.image, gt.mask)
    fitted = fit_pose_by_grid(
        generated, target_params, model, resolution, pose_grid, identity_seed
    )
    lm_target = screen_to_pixels(project_landmarks(model, target_params), resolution)
    lm_fitted = screen_to_pixels(project_landmarks(model, fitted), resolution)
    landmark_rmse = float(np.sqrt(((lm_target - lm_fitted) ** 2).sum(axis=1).mean()))
    return {
        "masked_rmse": rmse,
        "landmark_rmse_px": landmark_rmse,
        "ssim_fg": ssim_foreground(generated, gt.image, gt.mask),
    }


def identity_consistency(
    images: list[np.ndarray], masks: list[np.ndarray], identity_encoder
) -> float:
    """Mean pairwise cosine similarity of identity-encoder token vectors."""
    if len(images) < 2:
        raise ValueError("need at least two images")
    vecs = [
        identity_encoder.encode(im, mask).tokens.reshape(-1)
        for im, mask in zip(images, masks)
    ]
    sims = [
        float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
        for u, v in combinations(vecs, 2)
    ]
    return float(np.mean(sims))


def identity_similarity(
    image_a: np.ndarray, mask_a: np.ndarray,
    image_b: np.ndarray, mask_b: np.ndarray,
    identity_encoder,
) -> float:
    u = identity_encoder.encode(image_a, mask_a).tokens.reshape(-1)
    v = identity_encoder.encode(image_b, mask_b).tokens.reshape(-1)
    return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))


def semantic_feature_fn(semantic_encoder):
    """Default Fréchet feature function: flattened semantic tokens."""

    def features(image: np.ndarray) -> np.ndarray:
        return semantic_encoder.encode(image).tokens.reshape(-1)

    return features


def frechet_between_sets(
    images_a: list[np.ndarray], images_b: list[np.ndarray], feature_fn
) -> float:
    feats_a = np.stack([feature_fn(im) for im in images_a])
    feats_b = np.stack([feature_fn(im) for im in images_b])
    mu1, s1 = feature_stats(feats_a)
    mu2, s2 = feature_stats(feats_b)
    return frechet_distance(mu1, s1, mu2, s2)
