"""Image quality metrics: PSNR and windowed SSIM (with analytic gradient).

SSIM uses an 11x11 Gaussian window (sigma 1.5), stabilizers C1 = 0.01^2 and
C2 = 0.03^2 on unit dynamic range, evaluated over valid window positions
only and averaged per channel.
"""

from __future__ import annotations

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) on unit-range images; +inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shape mismatch")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized separable Gaussian window."""
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _window_moments(img: np.ndarray, kernel: np.ndarray):
    """Weighted window means of img over all valid positions (2D input)."""
    win = np.lib.stride_tricks.sliding_window_view(img, kernel.shape)
    return np.tensordot(win, kernel, axes=([2, 3], [0, 1]))


def _scatter_windows(coef: np.ndarray, kernel: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of `_window_moments`: spread window coefficients to pixels."""
    out = np.zeros(shape, dtype=np.float64)
    hh, ww = coef.shape
    for a in range(kernel.shape[0]):
        for b in range(kernel.shape[1]):
            out[a:a + hh, b:b + ww] += kernel[a, b] * coef
    return out


def _ssim_channel(x: np.ndarray, y: np.ndarray, kernel: np.ndarray, want_grad: bool):
    mu_x = _window_moments(x, kernel)
    mu_y = _window_moments(y, kernel)
    xx = _window_moments(x * x, kernel)
    yy = _window_moments(y * y, kernel)
    xy = _window_moments(x * y, kernel)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y

    a1 = 2.0 * mu_x * mu_y + C1
    a2 = 2.0 * cov + C2
    b1 = mu_x * mu_x + mu_y * mu_y + C1
    b2 = var_x + var_y + C2
    denom = b1 * b2
    s = (a1 * a2) / denom

    if not want_grad:
        return s, None

    # d s / d x_i = w_i (c0 + c1 x_i + c2 y_i), per window.
    c0 = 2.0 * (mu_y * a2 - a1 * mu_y - s * mu_x * b2 + s * b1 * mu_x) / denom
    c1 = -2.0 * s * b1 / denom
    c2 = 2.0 * a1 / denom
    g = (
        _scatter_windows(c0, kernel, x.shape)
        + x * _scatter_windows(c1, kernel, x.shape)
        + y * _scatter_windows(c2, kernel, x.shape)
    )
    return s, g


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over valid windows, averaged across channels."""
    value, _ = ssim_with_grad(a, b, want_grad=False)
    return value


def ssim_with_grad(a: np.ndarray, b: np.ndarray, want_grad: bool = True):
    """SSIM plus (optionally) d SSIM / d a with the same averaging."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shape mismatch")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    h, w, c = a.shape
    if min(h, w) < SSIM_WINDOW:
        raise ValueError("image too small for SSIM")
    kernel = gaussian_window()
    total = 0.0
    grad = np.zeros_like(a) if want_grad else None
    n_windows = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)
    for ch in range(c):
        s, g = _ssim_channel(a[:, :, ch], b[:, :, ch], kernel, want_grad)
        total += float(s.sum())
        if want_grad:
            grad[:, :, ch] = g
    value = total / (n_windows * c)
    if want_grad:
        grad = grad / (n_windows * c)
    return value, grad
