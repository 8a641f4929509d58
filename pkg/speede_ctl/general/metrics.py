"""Image quality and grouping metrics"""
from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d, correlate2d

from .general import DimensionMismatchError

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise DimensionMismatchError(
            f"Image dimensions differ: {np.shape(a)} vs {np.shape(b)}"
        )


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal to noise ratio in dB for images on the [0,1] range."""
    check_same_shape(a, b)
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _channels(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image[..., None] if image.ndim == 2 else image


def _check_ssim_size(a: np.ndarray) -> None:
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise DimensionMismatchError(
            f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[1]}x{a.shape[0]}"
        )


def _ssim_terms(x: np.ndarray, y: np.ndarray, window: np.ndarray) -> dict[str, np.ndarray]:
    mu_x = correlate2d(x, window, mode="valid")
    mu_y = correlate2d(y, window, mode="valid")
    var_x = correlate2d(x * x, window, mode="valid") - mu_x**2
    var_y = correlate2d(y * y, window, mode="valid") - mu_y**2
    cov = correlate2d(x * y, window, mode="valid") - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_x**2 + mu_y**2 + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    return {"mu_x": mu_x, "mu_y": mu_y, "a1": a1, "a2": a2, "b1": b1, "b2": b2,
            "s": (a1 * a2) / (b1 * b2)}


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all valid 11×11 windows and channels."""
    check_same_shape(a, b)
    a, b = _channels(a), _channels(b)
    _check_ssim_size(a)
    window = gaussian_window()
    values = [_ssim_terms(a[..., c], b[..., c], window)["s"] for c in range(a.shape[2])]
    return float(np.mean(np.stack(values)))


def ssim_gradient(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean SSIM and its gradient with respect to the first image."""
    check_same_shape(x, y)
    squeeze = np.ndim(x) == 2
    x, y = _channels(x), _channels(y)
    _check_ssim_size(x)
    window = gaussian_window()
    grad = np.zeros_like(x)
    values = []
    count = None
    for c in range(x.shape[2]):
        t = _ssim_terms(x[..., c], y[..., c], window)
        s = t["s"]
        values.append(s)
        count = s.size * x.shape[2]
        d_mu = s * (2.0 * t["mu_y"] / t["a1"] - 2.0 * t["mu_x"] / t["b1"])
        d_var = -2.0 * s / t["b2"]
        d_cov = 2.0 * s / t["a2"]
        # Adjoint of the valid correlation is a full convolution.
        base = convolve2d(d_mu - d_var * t["mu_x"] - d_cov * t["mu_y"], window, mode="full")
        grad[..., c] = (
            base
            + x[..., c] * convolve2d(d_var, window, mode="full")
            + y[..., c] * convolve2d(d_cov, window, mode="full")
        )
    grad /= count
    value = float(np.mean(np.stack(values)))
    return value, (grad[..., 0] if squeeze else grad)


def grouping_purity(assignment: np.ndarray, labels: np.ndarray) -> float:
    """Share of items that fall in the dominant true label of their group."""
    assignment = np.asarray(assignment).ravel()
    labels = np.asarray(labels).ravel()
    if assignment.shape != labels.shape:
        raise DimensionMismatchError(
            f"Assignment and labels differ in length: {assignment.size} vs {labels.size}"
        )
    if assignment.size == 0:
        return 1.0
    _, group_ids = np.unique(assignment, return_inverse=True)
    _, label_ids = np.unique(labels, return_inverse=True)
    table = np.zeros((group_ids.max() + 1, label_ids.max() + 1), dtype=np.int64)
    np.add.at(table, (group_ids, label_ids), 1)
    return float(table.max(axis=1).sum() / assignment.size)
