"""Image quality metrics and classification accuracy.

PSNR and SSIM both assume intensities in [0, 1] (data range 1.0).
SSIM follows the standard single-scale formulation: an 11x11 Gaussian
window with sigma 1.5, stability constants C1 = 0.01^2 and C2 = 0.03^2,
and statistics taken over valid window positions only, so no padding
enters the score.
"""

import math

import numpy as np

from .errors import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def psnr(reference, test):
    """Peak signal-to-noise ratio in dB; identical inputs give math.inf."""
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise ShapeError(f"shape mismatch: {reference.shape} vs {test.shape}")
    mse = float(np.mean((reference - test) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Normalized 2-D Gaussian weights of shape (size, size)."""
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def _windowed_mean(img, window):
    # Valid-mode weighted local means via stride tricks; img is (H, W).
    k = window.shape[0]
    patches = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("ijkl,kl->ij", patches, window)


def ssim(reference, test):
    """Mean SSIM over valid windows; 1.0 when the inputs are identical."""
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise ShapeError(f"shape mismatch: {reference.shape} vs {test.shape}")
    if reference.ndim != 2:
        raise ShapeError(f"expected 2-d images, got shape {reference.shape}")
    h, w = reference.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")

    window = gaussian_window()
    mu_a = _windowed_mean(reference, window)
    mu_b = _windowed_mean(test, window)
    var_a = _windowed_mean(reference * reference, window) - mu_a ** 2
    var_b = _windowed_mean(test * test, window) - mu_b ** 2
    cov = _windowed_mean(reference * test, window) - mu_a * mu_b

    num = (2.0 * mu_a * mu_b + _C1) * (2.0 * cov + _C2)
    den = (mu_a ** 2 + mu_b ** 2 + _C1) * (var_a + var_b + _C2)
    return float(np.mean(num / den))


def accuracy(predictions, labels):
    """Fraction of exact matches between two equal-length label arrays."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError(f"shape mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ShapeError("cannot score an empty prediction set")
    return float(np.mean(predictions == labels))


def confusion_counts(predictions, labels, num_classes):
    """Confusion matrix with true classes as rows, predictions as columns."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ShapeError(f"shape mismatch: {predictions.shape} vs {labels.shape}")
    mat = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(mat, (labels, predictions), 1)
    return mat
