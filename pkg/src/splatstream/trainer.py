"""Streaming training: full frame-0 optimization of the anchor hierarchy and
MLP, then per-frame refinement of dynamic-anchor residuals only.

Frame 0 runs a progressive schedule: the maximum active LoD level rises in
equal epoch slices, level-aware dropout regularizes the Gaussians, and every
200 iterations anchors are promoted by gradient and pruned by opacity.
Later frames probe motion, partition anchors with the GMM, and optimize the
quantized residual payload against the new views while everything static
stays bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anchors import LoDHierarchy
from .decoder import (
    DropoutSchedule, SeparateMLPs, SharedMLP, decode_arrays, decode_backward,
    dropout_mask,
)
from .geometry import Camera, project_gaussians_backward
from .metrics import psnr, ssim_with_grad
from .motion import (
    GradientLedger, accumulate_motion_gradients, classify_dynamic, fit_gmm,
)
from .rasterizer import RenderSettings, render, render_backward
from .residuals import (
    LATENT_DIM, LatentDecoders, ResidualSet, apply_residual, encode_frame,
    quantize_indices, quantize_ste,
)


@dataclass
class TrainConfig:
    init_epochs: int = 500
    stream_epochs: int = 10
    lam: float = 0.2
    lr_feature: float = 5e-3
    lr_offsets: float = 1e-2
    lr_scales: float = 5e-3
    lr_mlp: float = 2e-3
    lr_latents: float = 1e-2
    lr_pos: float = 1e-3
    lr_decoders: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_window_init: int = 200
    grad_window_stream: int = 30
    quant_step: float = 0.02
    rho: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        for name in ("lr_feature", "lr_offsets", "lr_scales", "lr_mlp",
                     "lr_latents", "lr_pos", "lr_decoders"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class Adam:
    """Adam with per-row lazy updates for the anchor parameter tables."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[str, dict] = {}

    def _ensure(self, name: str, param: np.ndarray, per_row: bool):
        if name not in self.state:
            self.state[name] = {
                "m": np.zeros_like(param),
                "v": np.zeros_like(param),
                "t": np.zeros(param.shape[0], dtype=np.int64) if per_row else 0,
            }

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float):
        """Dense update over the full parameter array."""
        self._ensure(name, param, per_row=False)
        s = self.state[name]
        s["t"] += 1
        s["m"] = self.beta1 * s["m"] + (1.0 - self.beta1) * grad
        s["v"] = self.beta2 * s["v"] + (1.0 - self.beta2) * grad * grad
        m_hat = s["m"] / (1.0 - self.beta1 ** s["t"])
        v_hat = s["v"] / (1.0 - self.beta2 ** s["t"])
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step_rows(self, name: str, param: np.ndarray, rows: np.ndarray,
                  grad_rows: np.ndarray, lr: float):
        """Update only the given rows, with per-row bias correction."""
        self._ensure(name, param, per_row=True)
        s = self.state[name]
        s["t"][rows] += 1
        t = s["t"][rows].reshape((-1,) + (1,) * (param.ndim - 1))
        s["m"][rows] = self.beta1 * s["m"][rows] + (1.0 - self.beta1) * grad_rows
        s["v"][rows] = self.beta2 * s["v"][rows] + (1.0 - self.beta2) * grad_rows ** 2
        m_hat = s["m"][rows] / (1.0 - self.beta1 ** t)
        v_hat = s["v"][rows] / (1.0 - self.beta2 ** t)
        param[rows] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def filter_rows(self, names: list[str], keep: np.ndarray):
        for name in names:
            if name in self.state:
                s = self.state[name]
                s["m"] = s["m"][keep]
                s["v"] = s["v"][keep]
                s["t"] = s["t"][keep]


def loss(render_img: np.ndarray, target: np.ndarray, lam: float):
    """Blended L1 / structural-dissimilarity loss and its image gradient."""
    if render_img.shape != target.shape:
        raise ValueError("image shape mismatch")
    diff = render_img - target
    l1 = float(np.mean(np.abs(diff)))
    g1 = np.sign(diff) / diff.size
    if lam == 0.0:
        return l1, g1
    s, gs = ssim_with_grad(render_img, target)
    value = (1.0 - lam) * l1 + lam * (1.0 - s)
    grad = (1.0 - lam) * g1 - lam * gs
    return value, grad


@dataclass
class ResidualOverlay:
    """Residual deltas applied on top of the frozen model during decoding."""

    rows: np.ndarray          # (n,) hierarchy rows (dynamic anchors)
    d_center: np.ndarray      # (n, 3)
    d_feature: np.ndarray     # (n, feature_dim)
    d_offsets: np.ndarray     # (n, K, 3)

    def __post_init__(self):
        self._pos = {int(r): i for i, r in enumerate(self.rows)}

    def positions_in(self, rows: np.ndarray):
        """(selected-local indices, overlay indices) for rows in the overlay."""
        local, ov = [], []
        for i, r in enumerate(rows):
            j = self._pos.get(int(r))
            if j is not None:
                local.append(i)
                ov.append(j)
        return np.asarray(local, dtype=np.int64), np.asarray(ov, dtype=np.int64)


@dataclass
class SceneModel:
    """The trainable scene: hierarchy + shared MLP (+ frozen latent decoders)."""

    hierarchy: LoDHierarchy
    mlp: SharedMLP | SeparateMLPs
    decoders: LatentDecoders | None = None

    def decode_rows(self, rows: np.ndarray, cam: Camera,
                    overlay: ResidualOverlay | None = None):
        h = self.hierarchy
        centers = h.centers[rows]
        features = h.features[rows]
        offsets = h.offsets[rows]
        if overlay is not None:
            local, ov = overlay.positions_in(rows)
            if local.size:
                centers = centers.copy()
                features = features.copy()
                offsets = offsets.copy()
                centers[local] += overlay.d_center[ov]
                features[local] += overlay.d_feature[ov]
                offsets[local] += overlay.d_offsets[ov]
        return decode_arrays(
            centers=centers, features=features, offsets=offsets,
            raw_scales=h.raw_scales[rows], levels=h.levels[rows],
            voxel_sizes=h.config.voxel_size(h.levels[rows]), cam=cam,
            mlp=self.mlp, d_max=h.config.d_max,
        )

    def render_view(self, cam: Camera, settings: RenderSettings,
                    overlay: ResidualOverlay | None = None) -> np.ndarray:
        rows = np.nonzero(self.hierarchy.select_mask(cam))[0]
        if rows.size == 0:
            from .rasterizer import GaussianBatch
            empty = GaussianBatch(
                mu=np.empty((0, 3)), scale=np.empty((0, 3)), rot=np.empty((0, 4)),
                opacity=np.empty(0), color=np.empty((0, 3)),
            )
            return render(empty, cam, settings).image
        batch, _ = self.decode_rows(rows, cam, overlay)
        return render(batch, cam, settings).image

    def snap_to_storage(self):
        self.hierarchy.snap_to_storage()
        for p in self.mlp.params().values():
            p[...] = p.astype(np.float32).astype(np.float64)
        if self.decoders is not None:
            self.decoders.snap_to_storage()


@dataclass
class TrainingReport:
    loss_trace: list[float] = field(default_factory=list)
    final_loss: float = 0.0
    final_psnr: float = 0.0
    epochs: int = 0
    promotions: int = 0
    pruned: int = 0


def _backward_step(model: SceneModel, cache, out, rg, keep, comp):
    """Chain raster gradients back to decoder parameter gradients."""
    proj = out._fwd["proj"]
    cam = out._fwd["cam"]
    d_mu, d_scale, d_rot = project_gaussians_backward(
        proj, cam, rg.d_mean2d, rg.d_cov2d
    )
    d_opacity = rg.d_opacity * keep * comp
    return decode_backward(
        cache, model.mlp, d_mu, d_scale, d_rot, d_opacity, rg.d_color
    )


def train_initial(
    model: SceneModel,
    views: list[tuple[Camera, np.ndarray]],
    cfg: TrainConfig,
    settings: RenderSettings,
    use_dropout: bool = True,
) -> TrainingReport:
    """Fit the hierarchy and MLP to the first frame's views."""
    h = model.hierarchy
    n_views = len(views)
    levels = h.config.levels
    total_steps = max(cfg.init_epochs * n_views, 1)
    sched = DropoutSchedule(total_steps=total_steps)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD0]))
    opt = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    anchor_params = ["features", "offsets", "raw_scales"]
    report = TrainingReport()
    interval = cfg.init_epochs / levels
    step = 0

    for epoch in range(cfg.init_epochs):
        h.config.l_max = min(int(epoch / interval) if interval > 0 else levels - 1,
                             levels - 1)
        epoch_losses = []
        for cam, target in views:
            rows = np.nonzero(h.select_mask(cam))[0]
            batch, cache = model.decode_rows(rows, cam)
            if use_dropout:
                keep, comp = dropout_mask(batch.level, step, sched, rng)
            else:
                keep = np.ones(len(batch), dtype=bool)
                comp = np.ones(len(batch))
            # Compensated opacity must stay below 1 for the compositor; the
            # clamp mask keeps the backward chain consistent.
            eff = batch.opacity * keep * comp
            unclamped = eff < 0.999
            comp = comp * unclamped
            batch.opacity = np.minimum(eff, 0.999)

            out = render(batch, cam, settings)
            value, d_image = loss(out.image, target, cfg.lam)
            epoch_losses.append(value)
            rg = render_backward(out, d_image)
            dg = _backward_step(model, cache, out, rg, keep, comp)

            k = h.config.k
            h.accumulate(
                rows,
                out.screen_grad.reshape(rows.size, k).mean(axis=1),
                cache.opacity.mean(axis=1),
            )
            h.visibility_count[rows] += (
                out.visibility.reshape(rows.size, k).any(axis=1)
            )

            opt.step_rows("features", h.features, rows, dg.feature, cfg.lr_feature)
            opt.step_rows("offsets", h.offsets, rows, dg.offsets, cfg.lr_offsets)
            opt.step_rows("raw_scales", h.raw_scales, rows, dg.raw_scales, cfg.lr_scales)
            for name, grad in _flatten_mlp_grads(dg.mlp).items():
                opt.step(f"mlp.{name}", model.mlp.params()[name], grad, cfg.lr_mlp)

            step += 1
            if step % cfg.grad_window_init == 0:
                report.promotions += h.promote_levels(cam)
                n_before = len(h)
                keep_mask = _prune_with_mask(h)
                report.pruned += n_before - len(h)
                if keep_mask is not None:
                    opt.filter_rows(anchor_params, keep_mask)
        report.loss_trace.append(float(np.mean(epoch_losses)))

    h.config.l_max = levels - 1
    model.snap_to_storage()
    report.epochs = cfg.init_epochs
    if report.loss_trace:
        report.final_loss = report.loss_trace[-1]
    vals = [psnr(model.render_view(cam, settings), img) for cam, img in views]
    report.final_psnr = float(np.mean(vals))
    return report


def _prune_with_mask(h: LoDHierarchy):
    """Prune anchors, returning the keep mask when anything was removed."""
    seen = h.opacity_count > 0
    mean = np.where(seen, h.opacity_sum / np.maximum(h.opacity_count, 1), np.inf)
    drop = seen & (mean < h.config.opacity_prune)
    if not drop.any():
        h.reset_windows()
        return None
    keep = ~drop
    h._drop_rows(np.nonzero(drop)[0])
    h.reset_windows()
    return keep


def _flatten_mlp_grads(tree: dict, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for key, value in tree.items():
        name = f"{prefix}.{key}" if prefix else key
        if isinstance(value, dict):
            out.update(_flatten_mlp_grads(value, name))
        else:
            out[name] = value
    return out


@dataclass
class FrameResult:
    frame: int
    residual: ResidualSet
    payload: bytes
    dyn_count: int
    final_loss: float
    partition_reused: bool
    epochs: int


def identify_dynamic(
    model: SceneModel,
    views: list[tuple[Camera, np.ndarray]],
    prev_views: list[tuple[Camera, np.ndarray]],
    cfg: TrainConfig,
    settings: RenderSettings,
    rho: float,
):
    """Partition anchors by their motion-gradient excess.

    Probes the squared-error screen gradients of the frozen model against the
    new frame and against the previous frame (which the model was last
    optimized toward). The positive excess isolates new motion from the
    model's standing fit error: an unchanged frame yields an all-zero ledger
    and therefore an empty dynamic set. Returns (dynamic ids, excess ledger,
    fitted mixture or None).
    """
    cams = [cam for cam, _ in views]
    ledger_new = accumulate_motion_gradients(
        model, cams, [img for _, img in views], settings, cfg.grad_window_stream
    )
    ledger_prev = accumulate_motion_gradients(
        model, cams, [img for _, img in prev_views], settings,
        cfg.grad_window_stream,
    )
    excess = np.maximum(ledger_new.mean() - ledger_prev.mean(), 0.0)
    ledger = GradientLedger(
        ids=ledger_new.ids, grad_sum=excess, obs_count=ledger_new.obs_count,
        count=1, window=cfg.grad_window_stream,
    )
    observed = ledger.observed()
    if observed.sum() < 2 or np.all(excess[observed] == excess[observed][0]):
        model.hierarchy.dynamic[:] = False
        return np.empty(0, dtype=np.int64), ledger, None
    gmm = fit_gmm(excess[observed])
    dyn_ids, _ = classify_dynamic(gmm, ledger, rho, hierarchy=model.hierarchy)
    return dyn_ids, ledger, gmm


def train_frame(
    model: SceneModel,
    views: list[tuple[Camera, np.ndarray]],
    t: int,
    cfg: TrainConfig,
    settings: RenderSettings,
    dyn_ids: np.ndarray,
    quantized: bool = True,
) -> FrameResult:
    """Optimize this frame's residual payload for the given dynamic anchors,
    then fold it into the model and serialize it."""
    h = model.hierarchy
    if len(dyn_ids) == 0:
        res = ResidualSet.empty(t, cfg.quant_step, cfg.quant_step, quantized)
        return FrameResult(
            frame=t, residual=res, payload=encode_frame(res), dyn_count=0,
            final_loss=float("nan"), partition_reused=False, epochs=0,
        )

    lookup = {int(a): i for i, a in enumerate(h.ids)}
    dyn_rows = np.array([lookup[int(a)] for a in dyn_ids], dtype=np.int64)
    n, k, fd = dyn_rows.size, h.config.k, h.config.feature_dim

    train_decoders = False
    if quantized and model.decoders is None:
        model.decoders = LatentDecoders.create(
            fd, k, np.random.SeedSequence([cfg.seed, 0xDEC])
        )
        train_decoders = True

    pos_delta = np.zeros((n, 3))
    feat_lat = np.zeros((n, LATENT_DIM))
    off_lat = np.zeros((n, LATENT_DIM))
    feat_delta = np.zeros((n, fd))
    off_delta = np.zeros((n, k, 3))
    opt = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    final_loss = float("nan")

    for _ in range(cfg.stream_epochs):
        for cam, target in views:
            if quantized:
                q_feat = quantize_ste(feat_lat, cfg.quant_step)
                q_off = quantize_ste(off_lat, cfg.quant_step)
                d_feature = model.decoders.feat_delta(q_feat)
                d_offsets = model.decoders.off_delta(q_off)
            else:
                d_feature = feat_delta
                d_offsets = off_delta
            overlay = ResidualOverlay(
                rows=dyn_rows, d_center=pos_delta,
                d_feature=d_feature, d_offsets=d_offsets,
            )
            rows = np.nonzero(h.select_mask(cam))[0]
            batch, cache = model.decode_rows(rows, cam, overlay)
            out = render(batch, cam, settings)
            value, d_image = loss(out.image, target, cfg.lam)
            final_loss = value
            rg = render_backward(out, d_image)
            keep = np.ones(len(batch), dtype=bool)
            comp = np.ones(len(batch))
            dg = _backward_step(model, cache, out, rg, keep, comp)

            local, ov = overlay.positions_in(rows)
            g_pos = np.zeros_like(pos_delta)
            g_feat_full = np.zeros((n, fd))
            g_off_full = np.zeros((n, k, 3))
            g_pos[ov] = dg.center[local]
            g_feat_full[ov] = dg.feature[local]
            g_off_full[ov] = dg.offsets[local]

            opt.step("pos", pos_delta, g_pos, cfg.lr_pos)
            if quantized:
                # Straight-through: latent gradient is the decoded-delta
                # gradient pulled back through the (fixed) linear decoder.
                g_feat_lat = g_feat_full @ model.decoders.d_feat
                g_off_lat = g_off_full.reshape(n, k * 3) @ model.decoders.d_off
                opt.step("feat_lat", feat_lat, g_feat_lat, cfg.lr_latents)
                opt.step("off_lat", off_lat, g_off_lat, cfg.lr_latents)
                if train_decoders:
                    g_df = g_feat_full.T @ q_feat
                    g_do = g_off_full.reshape(n, k * 3).T @ q_off
                    opt.step("d_feat", model.decoders.d_feat, g_df, cfg.lr_decoders)
                    opt.step("d_off", model.decoders.d_off, g_do, cfg.lr_decoders)
            else:
                opt.step("feat_delta", feat_delta, g_feat_full, cfg.lr_latents)
                opt.step("off_delta", off_delta, g_off_full, cfg.lr_latents)

    if train_decoders:
        model.decoders.snap_to_storage()

    if quantized:
        res = ResidualSet(
            frame=t, ids=dyn_ids, pos_delta=pos_delta.astype(np.float32),
            feat_q=quantize_indices(feat_lat, cfg.quant_step),
            off_q=quantize_indices(off_lat, cfg.quant_step),
            dq_feat=cfg.quant_step, dq_off=cfg.quant_step, quantized=True,
        )
    else:
        res = ResidualSet(
            frame=t, ids=dyn_ids, pos_delta=pos_delta.astype(np.float32),
            dq_feat=cfg.quant_step, dq_off=cfg.quant_step, quantized=False,
            feat_delta=feat_delta.astype(np.float32),
            off_delta=off_delta.astype(np.float32),
        )
    apply_residual(h, res, model.decoders)
    return FrameResult(
        frame=t, residual=res, payload=encode_frame(res), dyn_count=n,
        final_loss=final_loss, partition_reused=False, epochs=cfg.stream_epochs,
    )
