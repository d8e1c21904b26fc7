"""Differentiable tile-based splatting of projected Gaussians.

Forward: per pixel, front-to-back alpha compositing of depth-sorted splats,
with splats binned to tiles by their 3-sigma screen rectangle. Backward:
analytic gradients for screen mean, 2D covariance, opacity and color, plus
the per-Gaussian screen-gradient magnitude used for level promotion and
motion partitioning.

Per-pixel arithmetic is kept to one fixed expression order so the tile path
agrees bit-for-bit with the brute-force compositor in `reference.py`. The
tile inner loops are vectorized over splats; np.cumprod/np.cumsum accumulate
strictly left-to-right, which preserves the sequential compositing order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, ProjectionCache, project_gaussians


@dataclass
class GaussianBatch:
    """Decoded 3D Gaussians, one row each."""

    mu: np.ndarray        # (G, 3)
    scale: np.ndarray     # (G, 3) positive
    rot: np.ndarray       # (G, 4) quaternion
    opacity: np.ndarray   # (G,) in (0, 1)
    color: np.ndarray     # (G, 3) in (0, 1)
    anchor_row: np.ndarray | None = None  # (G,) parent anchor row index
    level: np.ndarray | None = None       # (G,) LoD level

    def __len__(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class RenderSettings:
    tile_size: int = 16
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # Stop compositing a pixel once transmittance drops below this. None
    # disables the cutoff (needed by finite-difference gradient checks).
    transmittance_cutoff: float | None = 1e-4
    # Splat support radius in units of sqrt(max eigenvalue of cov2d). None
    # disables support culling entirely (gradient checks).
    support_sigma: float | None = 3.0
    max_splats_per_pixel: int = 4096

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValueError("tile size must be >= 1")
        bg = np.asarray(self.background, dtype=np.float64)
        if np.any(bg < 0.0) or np.any(bg > 1.0):
            raise ValueError("background must lie in [0, 1]")


@dataclass
class RenderOutput:
    image: np.ndarray              # (H, W, 3)
    visibility: np.ndarray         # (G,) bool
    screen_grad: np.ndarray        # (G,) magnitudes, filled by render_backward
    skipped_singular: int
    _fwd: dict = field(default_factory=dict, repr=False)


@dataclass
class RasterGrads:
    d_mean2d: np.ndarray   # (G, 2)
    d_cov2d: np.ndarray    # (G, 3) as (m11, m12, m22)
    d_opacity: np.ndarray  # (G,)
    d_color: np.ndarray    # (G, 3)
    screen_grad: np.ndarray  # (G,) normalized-pixel magnitudes


def _conic_and_radius(cov2d: np.ndarray, support_sigma: float | None):
    """Invert the (dilated) 2D covariances and bound their screen support."""
    m11, m12, m22 = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = m11 * m22 - m12 * m12
    ok = det > 0.0
    det_safe = np.where(ok, det, 1.0)
    conic = np.stack([m22 / det_safe, -m12 / det_safe, m11 / det_safe], axis=-1)
    # Largest eigenvalue of the 2x2 covariance.
    mid = 0.5 * (m11 + m22)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    if support_sigma is None:
        radius = np.full(len(cov2d), np.inf)
    else:
        radius = support_sigma * np.sqrt(np.maximum(lam, 0.0))
    return conic, radius, ok


def _depth_order(depth: np.ndarray, alive: np.ndarray) -> np.ndarray:
    """Global front-to-back order over alive splats; ties broken by index."""
    idx = np.nonzero(alive)[0]
    return idx[np.lexsort((idx, depth[idx]))]


def _pixel_grid(x0: int, x1: int, y0: int, y1: int):
    """Flattened pixel-center coordinates of a tile block."""
    xs = np.arange(x0, x1, dtype=np.float64) + 0.5
    ys = np.arange(y0, y1, dtype=np.float64) + 0.5
    px = np.broadcast_to(xs[None, :], (y1 - y0, x1 - x0)).reshape(-1)
    py = np.broadcast_to(ys[:, None], (y1 - y0, x1 - x0)).reshape(-1)
    return px, py


def _tile_lists(mean2d, radius, order, w, h, ts):
    """Per-tile splat index lists, each kept in global depth order."""
    ntx, nty = -(-w // ts), -(-h // ts)
    tiles: list[list[int]] = [[] for _ in range(ntx * nty)]
    for idx in order:
        r = radius[idx]
        mx, my = mean2d[idx]
        if not np.isfinite(r):
            tx0, tx1, ty0, ty1 = 0, ntx - 1, 0, nty - 1
        else:
            tx0 = max(int((mx - r) // ts), 0)
            tx1 = min(int((mx + r) // ts), ntx - 1)
            ty0 = max(int((my - r) // ts), 0)
            ty1 = min(int((my + r) // ts), nty - 1)
            if tx0 > tx1 or ty0 > ty1:
                continue
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                tiles[ty * ntx + tx].append(idx)
    return tiles, ntx, nty


def _tile_state(px, py, mean2d, conic, radius, opac, cutoff, max_splats):
    """Vectorized per-splat/per-pixel compositing state for one tile.

    Expression order matches the reference compositor exactly; np.cumprod
    multiplies strictly left-to-right, reproducing sequential transmittance.
    """
    dx = px[None, :] - mean2d[:, 0][:, None]
    dy = py[None, :] - mean2d[:, 1][:, None]
    q = (
        conic[:, 0][:, None] * dx * dx
        + 2.0 * conic[:, 1][:, None] * dx * dy
        + conic[:, 2][:, None] * dy * dy
    )
    g_exp = np.exp(-0.5 * q)
    alpha = opac[:, None] * g_exp
    support = (np.abs(dx) <= radius[:, None]) & (np.abs(dy) <= radius[:, None])

    n_splats = mean2d.shape[0]
    if max_splats < n_splats:
        # The per-pixel splat budget can bind: replay the gates sequentially.
        act = np.empty_like(support)
        tt = np.ones(px.size)
        t_excl = np.empty_like(alpha)
        count = np.zeros(px.size, dtype=np.int64)
        for i in range(n_splats):
            t_excl[i] = tt
            a = support[i] & (count < max_splats)
            if cutoff is not None:
                a &= tt >= cutoff
            act[i] = a
            tt = np.where(a, tt * (1.0 - alpha[i]), tt)
            count += a
        return dx, dy, g_exp, alpha, act, t_excl, tt

    factors = np.where(support, 1.0 - alpha, 1.0)
    t_incl = np.cumprod(factors, axis=0)
    t_excl = np.empty_like(t_incl)
    t_excl[0] = 1.0
    t_excl[1:] = t_incl[:-1]
    if cutoff is None:
        act = support
        t_final = t_incl[-1]
    else:
        act = support & (t_excl >= cutoff)
        # Freeze transmittance at its first sub-cutoff value, as the
        # sequential compositor does.
        below = t_incl < cutoff
        any_below = below.any(axis=0)
        first = below.argmax(axis=0)
        t_final = np.where(any_below, t_incl[first, np.arange(px.size)], t_incl[-1])
    return dx, dy, g_exp, alpha, act, t_excl, t_final


def render(
    gaussians: GaussianBatch,
    cam: Camera,
    settings: RenderSettings = RenderSettings(),
    proj: ProjectionCache | None = None,
) -> RenderOutput:
    """Rasterize Gaussians to an (H, W, 3) image."""
    g = len(gaussians)
    h, w = cam.height, cam.width
    bg = np.asarray(settings.background, dtype=np.float64)

    if proj is None and g > 0:
        proj = project_gaussians(gaussians.mu, gaussians.scale, gaussians.rot, cam)

    image = np.empty((h, w, 3), dtype=np.float64)
    visibility = np.zeros(g, dtype=bool)
    out = RenderOutput(
        image=image, visibility=visibility,
        screen_grad=np.zeros(g, dtype=np.float64), skipped_singular=0,
    )
    if g == 0:
        image[:] = bg
        return out

    conic, radius, invertible = _conic_and_radius(proj.cov2d, settings.support_sigma)
    alive = proj.valid & invertible
    out.skipped_singular = int(np.count_nonzero(proj.valid & ~invertible))
    order = _depth_order(proj.depth, alive)

    ts = settings.tile_size
    tiles, ntx, nty = _tile_lists(proj.mean2d, radius, order, w, h, ts)
    cutoff = settings.transmittance_cutoff
    max_splats = settings.max_splats_per_pixel

    for ty in range(nty):
        for tx in range(ntx):
            x0, x1 = tx * ts, min((tx + 1) * ts, w)
            y0, y1 = ty * ts, min((ty + 1) * ts, h)
            tlist = tiles[ty * ntx + tx]
            px, py = _pixel_grid(x0, x1, y0, y1)
            if not tlist:
                image[y0:y1, x0:x1] = bg
                continue
            sel = np.asarray(tlist, dtype=np.int64)
            _, _, _, alpha, act, t_excl, t_final = _tile_state(
                px, py, proj.mean2d[sel], conic[sel], radius[sel],
                gaussians.opacity[sel], cutoff, max_splats,
            )
            wgt = np.where(act, alpha * t_excl, 0.0)  # (S, P)
            # cumsum accumulates front-to-back exactly like the per-splat loop
            contrib = wgt[:, :, None] * gaussians.color[sel][:, None, :]
            tc = np.cumsum(contrib, axis=0)[-1]
            tc = tc + bg[None, :] * t_final[:, None]
            visibility[sel] |= act.any(axis=1)
            image[y0:y1, x0:x1] = tc.reshape(y1 - y0, x1 - x0, 3)

    out._fwd = {
        "proj": proj, "order": order, "tiles": tiles, "conic": conic,
        "radius": radius, "settings": settings, "cam": cam,
        "gaussians": gaussians, "ntx": ntx, "nty": nty,
    }
    return out


def render_backward(
    output: RenderOutput, d_image: np.ndarray, tile_order: list[int] | None = None
) -> RasterGrads:
    """Analytic backward of `render` given dL/dimage.

    Recomputes the forward per tile (nothing per-pixel is cached), then
    resolves each splat's contribution gradient against the color composited
    behind it. Also fills `output.screen_grad` with per-Gaussian
    normalized-pixel gradient magnitudes. `tile_order` lets callers schedule
    tiles arbitrarily; per-Gaussian accumulation is order-independent to
    floating-point noise.
    """
    fwd = output._fwd
    if not fwd:
        raise ValueError("stale forward state")
    cam: Camera = fwd["cam"]
    if d_image.shape != (cam.height, cam.width, 3):
        raise ValueError("stale forward state")

    gaussians: GaussianBatch = fwd["gaussians"]
    settings: RenderSettings = fwd["settings"]
    proj: ProjectionCache = fwd["proj"]
    conic, radius = fwd["conic"], fwd["radius"]
    tiles, ntx, nty = fwd["tiles"], fwd["ntx"], fwd["nty"]
    g = len(gaussians)
    ts = settings.tile_size
    w, h = cam.width, cam.height
    bg = np.asarray(settings.background, dtype=np.float64)
    cutoff = settings.transmittance_cutoff
    max_splats = settings.max_splats_per_pixel

    d_mean2d = np.zeros((g, 2), dtype=np.float64)
    d_conic = np.zeros((g, 3), dtype=np.float64)
    d_opacity = np.zeros(g, dtype=np.float64)
    d_color = np.zeros((g, 3), dtype=np.float64)

    if tile_order is None:
        tile_order = range(ntx * nty)
    for flat in tile_order:
        ty, tx = divmod(flat, ntx)
        tlist = tiles[ty * ntx + tx]
        if not tlist:
            continue
        x0, x1 = tx * ts, min((tx + 1) * ts, w)
        y0, y1 = ty * ts, min((ty + 1) * ts, h)
        px, py = _pixel_grid(x0, x1, y0, y1)
        sel = np.asarray(tlist, dtype=np.int64)  # unique within a tile
        colors = gaussians.color[sel]
        dx, dy, g_exp, alpha, act, t_excl, t_final = _tile_state(
            px, py, proj.mean2d[sel], conic[sel], radius[sel],
            gaussians.opacity[sel], cutoff, max_splats,
        )
        dc = d_image[y0:y1, x0:x1].reshape(-1, 3)   # (P, 3)
        wgt = np.where(act, alpha * t_excl, 0.0)    # (S, P)

        d_color[sel] += wgt @ dc

        # s_behind[i] = sum_{j>i} c_j w_j + bg * T_final, per pixel/channel
        cw = wgt[:, :, None] * colors[:, None, :]            # (S, P, 3)
        suffix = cw[::-1].cumsum(axis=0)[::-1]
        s_behind = np.empty_like(cw)
        s_behind[:-1] = suffix[1:]
        s_behind[-1] = 0.0
        s_behind += bg[None, None, :] * t_final[None, :, None]

        # dC/dalpha' = c_i T_i - S_i / (1 - alpha'_i)
        inner = colors[:, None, :] * t_excl[:, :, None] - s_behind / (
            1.0 - alpha[:, :, None]
        )
        d_alpha_pix = np.where(act, np.einsum("spc,pc->sp", inner, dc), 0.0)

        d_opacity[sel] += (d_alpha_pix * g_exp).sum(axis=1)
        d_power = d_alpha_pix * alpha
        a, b, c = conic[sel, 0][:, None], conic[sel, 1][:, None], conic[sel, 2][:, None]
        d_mean2d[sel, 0] += (d_power * (a * dx + b * dy)).sum(axis=1)
        d_mean2d[sel, 1] += (d_power * (b * dx + c * dy)).sum(axis=1)
        d_conic[sel, 0] += (d_power * (-0.5 * dx * dx)).sum(axis=1)
        d_conic[sel, 1] += (d_power * (-dx * dy)).sum(axis=1)
        d_conic[sel, 2] += (d_power * (-0.5 * dy * dy)).sum(axis=1)

    d_cov2d = _conic_backward(proj.cov2d, d_conic)

    screen = np.hypot(d_mean2d[:, 0] * (w / 2.0), d_mean2d[:, 1] * (h / 2.0))
    output.screen_grad = screen
    return RasterGrads(
        d_mean2d=d_mean2d, d_cov2d=d_cov2d, d_opacity=d_opacity,
        d_color=d_color, screen_grad=screen,
    )


def _conic_backward(cov2d: np.ndarray, d_conic: np.ndarray) -> np.ndarray:
    """Chain (a, b, c) = inverse(m11, m12, m22) gradients back to the covariance."""
    m11, m12, m22 = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = m11 * m22 - m12 * m12
    ok = det > 0.0
    d2 = np.where(ok, det * det, 1.0)
    da, db, dc = d_conic[:, 0], d_conic[:, 1], d_conic[:, 2]
    dm11 = (
        da * (-m22 * m22)
        + db * (m12 * m22)
        + dc * (-m12 * m12)
    ) / d2
    dm12 = (
        da * (2.0 * m12 * m22)
        + db * (-(det + 2.0 * m12 * m12))
        + dc * (2.0 * m12 * m11)
    ) / d2
    dm22 = (
        da * (-m12 * m12)
        + db * (m12 * m11)
        + dc * (-m11 * m11)
    ) / d2
    out = np.stack([dm11, dm12, dm22], axis=-1)
    return np.where(ok[:, None], out, 0.0)
