"""Brute-force splat compositor: no tiles, every pixel sees every splat.

This is the oracle for the tile renderer and the ground-truth path for
synthetic scene generation. It must stay independent of the tiling logic in
`rasterizer.py`; only the per-splat pixel arithmetic is intentionally kept
to the identical expression order so the two paths agree bit-for-bit.
"""

from __future__ import annotations

import numpy as np

from .geometry import Camera, project_gaussians
from .rasterizer import GaussianBatch, RenderSettings


def reference_render(
    gaussians: GaussianBatch, cam: Camera, settings: RenderSettings = RenderSettings()
) -> np.ndarray:
    """Composite all Gaussians over the full image, depth-sorted, no binning."""
    h, w = cam.height, cam.width
    bg = np.asarray(settings.background, dtype=np.float64)
    image_c = np.zeros((3, h * w), dtype=np.float64)
    tt = np.ones(h * w, dtype=np.float64)
    if len(gaussians) == 0:
        image_c += bg[:, None] * tt
        return image_c.reshape(3, h, w).transpose(1, 2, 0)

    proj = project_gaussians(gaussians.mu, gaussians.scale, gaussians.rot, cam)
    m11, m12, m22 = proj.cov2d[:, 0], proj.cov2d[:, 1], proj.cov2d[:, 2]
    det = m11 * m22 - m12 * m12
    alive = proj.valid & (det > 0.0)
    det_safe = np.where(det > 0.0, det, 1.0)
    conic = np.stack([m22 / det_safe, -m12 / det_safe, m11 / det_safe], axis=-1)
    mid = 0.5 * (m11 + m22)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    if settings.support_sigma is None:
        radius = np.full(len(gaussians), np.inf)
    else:
        radius = settings.support_sigma * np.sqrt(np.maximum(lam, 0.0))

    idx_alive = np.nonzero(alive)[0]
    order = idx_alive[np.lexsort((idx_alive, proj.depth[idx_alive]))]

    xs = np.arange(w, dtype=np.float64) + 0.5
    ys = np.arange(h, dtype=np.float64) + 0.5
    px = np.broadcast_to(xs[None, :], (h, w)).reshape(-1)
    py = np.broadcast_to(ys[:, None], (h, w)).reshape(-1)

    count = np.zeros(h * w, dtype=np.int64)
    cutoff = settings.transmittance_cutoff
    for idx in order:
        dx = px - proj.mean2d[idx, 0]
        dy = py - proj.mean2d[idx, 1]
        q = conic[idx, 0] * dx * dx + 2.0 * conic[idx, 1] * dx * dy + conic[idx, 2] * dy * dy
        alpha = gaussians.opacity[idx] * np.exp(-0.5 * q)
        if np.isfinite(radius[idx]):
            act = (np.abs(dx) <= radius[idx]) & (np.abs(dy) <= radius[idx])
        else:
            act = np.ones(px.shape, dtype=bool)
        if cutoff is not None:
            act &= tt >= cutoff
        act &= count < settings.max_splats_per_pixel
        if not act.any():
            continue
        wgt = np.where(act, alpha * tt, 0.0)
        image_c += wgt * gaussians.color[idx][:, None]
        tt = np.where(act, tt * (1.0 - alpha), tt)
        count += act
    image_c += bg[:, None] * tt
    return image_c.reshape(3, h, w).transpose(1, 2, 0)


def composite_pixel(
    pixel_xy: tuple[float, float],
    means_2d: np.ndarray,
    conics: np.ndarray,
    opacities: np.ndarray,
    colors: np.ndarray,
    background: np.ndarray,
) -> np.ndarray:
    """Scalar single-pixel compositor over pre-sorted splats (test oracle)."""
    t = 1.0
    c = np.zeros(3, dtype=np.float64)
    x, y = pixel_xy
    for i in range(means_2d.shape[0]):
        dx = x - means_2d[i, 0]
        dy = y - means_2d[i, 1]
        q = conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy
        alpha = opacities[i] * np.exp(-0.5 * q)
        c = c + colors[i] * (alpha * t)
        t = t * (1.0 - alpha)
    return c + background * t
