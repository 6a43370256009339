"""Evaluation metrics: PSNR, SSIM, depth errors, Fréchet distance, Met3R.

SSIM is computed on the grayscale intensity map with the canonical 11x11
Gaussian window (sigma 1.5) and stabilizers C1 = (0.01 MAX)^2,
C2 = (0.03 MAX)^2, averaged over windows fully inside the image. Depth
metrics run over pixels valid in both maps (value > 0); optional median
alignment rescales the prediction by median(gt) / median(pred) first.

The Fréchet distance uses the symmetric-product matrix square root
S = C1^{1/2} C2 C1^{1/2} via eigendecomposition, which keeps the computation
on symmetric PSD matrices throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import NumericError
from .palette import intensity_map
from .scene import check_depth, check_image

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """10 log10(MAX^2 / MSE); identical images give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(max_val * max_val / mse)


def _ssim_window() -> np.ndarray:
    half = (SSIM_WINDOW - 1) / 2.0
    coords = np.arange(SSIM_WINDOW) - half
    kernel = np.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return kernel / kernel.sum()


def _window_means(img: np.ndarray) -> np.ndarray:
    """Separable windowed means, restricted to fully interior windows."""
    kernel = _ssim_window()
    half = SSIM_WINDOW // 2
    smoothed = ndimage.correlate1d(img, kernel, axis=0, mode="constant")
    smoothed = ndimage.correlate1d(smoothed, kernel, axis=1, mode="constant")
    return smoothed[half:-half, half:-half]


def ssim(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """Mean structural similarity of the two images' intensity maps."""
    a = check_image(a)
    b = check_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    x = intensity_map(a).astype(np.float64)
    y = intensity_map(b).astype(np.float64)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    mu_x = _window_means(x)
    mu_y = _window_means(y)
    var_x = _window_means(x * x) - mu_x * mu_x
    var_y = _window_means(y * y) - mu_y * mu_y
    cov_xy = _window_means(x * y) - mu_x * mu_y
    score = ((2 * mu_x * mu_y + c1) * (2 * cov_xy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return float(score.mean())


@dataclass(frozen=True)
class DepthMetricReport:
    abs_rel: float
    rmse: float
    rmse_log: float
    delta125: float
    valid_pixel_count: int


def depth_metrics(pred: np.ndarray, gt: np.ndarray, align: str = "none") -> DepthMetricReport:
    """Standard depth errors over pixels where both maps are > 0."""
    pred = check_depth(pred).astype(np.float64)
    gt = check_depth(gt).astype(np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if align not in ("none", "median"):
        raise ValueError(f"align must be 'none' or 'median', got {align!r}")
    valid = (pred > 0) & (gt > 0)
    count = int(np.count_nonzero(valid))
    if count == 0:
        raise ValueError("no valid pixels: both maps are zero everywhere they overlap")
    p = pred[valid]
    g = gt[valid]
    if align == "median":
        p = p * (np.median(g) / np.median(p))
    abs_rel = float(np.mean(np.abs(p - g) / g))
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    rmse_log = float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2)))
    ratio = np.maximum(p / g, g / p)
    delta125 = float(np.mean(ratio < 1.25))
    return DepthMetricReport(abs_rel, rmse, rmse_log, delta125, count)


def fit_embedding_gaussian(embeddings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased covariance of an (N, d) embedding cloud."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise ValueError(f"expected (N, d) embeddings, got shape {emb.shape}")
    if emb.shape[0] < 2:
        raise ValueError("need at least 2 embeddings to fit a Gaussian")
    mean = emb.mean(axis=0)
    cov = np.atleast_2d(np.cov(emb, rowvar=False, ddof=1))
    return mean, cov


def _clamped_psd(cov: np.ndarray, name: str) -> np.ndarray:
    sym = (cov + cov.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    if eigvals.min() < -1e-8:
        raise NumericError(f"{name} is indefinite (min eigenvalue {eigvals.min():.3e})")
    eigvals = np.maximum(eigvals, 0.0)
    return (eigvecs * eigvals) @ eigvecs.T


def frechet_distance(mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray, cov2: np.ndarray) -> float:
    """Wasserstein-2 distance between two Gaussians.

    ||mu1 - mu2||^2 + Tr(C1 + C2 - 2 (C1 C2)^{1/2}), with the cross term
    evaluated as Tr(S^{1/2}) for S = C1^{1/2} C2 C1^{1/2}.
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=np.float64))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape[0] != mu1.shape[0]:
        raise ValueError("mean/covariance dimensions do not agree")
    c1 = _clamped_psd(cov1, "cov1")
    c2 = _clamped_psd(cov2, "cov2")

    vals1, vecs1 = np.linalg.eigh(c1)
    sqrt1 = (vecs1 * np.sqrt(np.maximum(vals1, 0.0))) @ vecs1.T
    product = sqrt1 @ c2 @ sqrt1
    product = (product + product.T) / 2.0
    vals = np.linalg.eigh(product)[0]
    if vals.min() < -1e-6:
        raise NumericError(f"cross-covariance product is indefinite (min eigenvalue {vals.min():.3e})")
    cross = float(np.sqrt(np.maximum(vals, 0.0)).sum())

    diff = mu1 - mu2
    dist = float(diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * cross)
    if dist < -1e-6:
        raise NumericError(f"negative squared distance beyond tolerance: {dist:.3e}")
    return max(dist, 0.0)


def met3r_sequence(pair_scores: list[float]) -> float:
    """Aggregate consecutive-pair consistency scores over an ordered sequence."""
    if len(pair_scores) == 0:
        raise ValueError("pair score list is empty")
    scores = np.asarray(pair_scores, dtype=np.float64)
    if scores.min() < 0.0 or scores.max() > 2.0:
        raise ValueError("pair scores must lie in [0, 2]")
    return float(scores.mean())
