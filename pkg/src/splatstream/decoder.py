"""Anchor-to-Gaussian decoding through one shared two-layer MLP.

Each selected anchor turns into K Gaussians: positions come from the
anchor's learnable offsets scaled by its voxel size, everything else is
predicted by the MLP from (feature, normalized viewing distance, viewing
direction). A level-aware dropout schedule regularizes training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, normalize_backward
from .rasterizer import GaussianBatch

SCALE_CLAMP = 10.0  # |raw scale modulation| clamp before exp


def _kaiming_uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    bound = np.sqrt(6.0 / in_dim)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


@dataclass
class Mlp2:
    """Two fully connected layers with a ReLU in between."""

    w1: np.ndarray  # (hidden, in)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (out, hidden)
    b2: np.ndarray  # (out,)

    @classmethod
    def create(cls, in_dim: int, hidden: int, out_dim: int, seed) -> "Mlp2":
        # Weights start at f32 precision: checkpoints store f32, and a fresh
        # model must survive a save/load round trip bit-exactly.
        rng = np.random.default_rng(seed)
        snap = lambda a: a.astype(np.float32).astype(np.float64)
        return cls(
            w1=snap(_kaiming_uniform(rng, hidden, in_dim)),
            b1=np.zeros(hidden),
            w2=snap(_kaiming_uniform(rng, out_dim, hidden)),
            b2=np.zeros(out_dim),
        )

    def forward(self, x: np.ndarray):
        h_pre = x @ self.w1.T + self.b1
        h = np.maximum(h_pre, 0.0)
        y = h @ self.w2.T + self.b2
        return y, (x, h_pre, h)

    def backward(self, cache, d_y: np.ndarray):
        x, h_pre, h = cache
        grads = {
            "w2": d_y.T @ h,
            "b2": d_y.sum(axis=0),
        }
        d_h = d_y @ self.w2
        d_h_pre = d_h * (h_pre > 0.0)
        grads["w1"] = d_h_pre.T @ x
        grads["b1"] = d_h_pre.sum(axis=0)
        d_x = d_h_pre @ self.w1
        return d_x, grads

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


# Head layout within the K x 11 output block of the shared MLP.
_OPACITY = slice(0, 1)
_COLOR = slice(1, 4)
_SCALE = slice(4, 7)
_ROT = slice(7, 11)


class SharedMLP:
    """One MLP predicting all Gaussian attributes (opacity, color, scale
    modulation, rotation) for the K Gaussians of an anchor."""

    IN_EXTRA = 4  # normalized distance (1) + view direction (3)

    def __init__(self, feature_dim: int = 32, hidden: int = 32, k: int = 10, seed: int = 0):
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.k = k
        self.net = Mlp2.create(feature_dim + self.IN_EXTRA, hidden, k * 11, seed)

    def heads(self, x: np.ndarray):
        y, cache = self.net.forward(x)
        return y.reshape(-1, self.k, 11), cache

    def heads_backward(self, cache, d_heads: np.ndarray):
        d_y = d_heads.reshape(d_heads.shape[0], self.k * 11)
        d_x, grads = self.net.backward(cache, d_y)
        return d_x, {"net": grads}

    def params(self) -> dict[str, np.ndarray]:
        return {f"net.{k}": v for k, v in self.net.params().items()}


class SeparateMLPs:
    """Ablation variant: four independent MLPs, one per attribute head."""

    IN_EXTRA = 4
    HEAD_DIMS = {"opacity": 1, "color": 3, "scale": 3, "rot": 4}

    def __init__(self, feature_dim: int = 32, hidden: int = 32, k: int = 10, seed: int = 0):
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.k = k
        in_dim = feature_dim + self.IN_EXTRA
        self.nets = {
            name: Mlp2.create(in_dim, hidden, k * dim, seed + i)
            for i, (name, dim) in enumerate(self.HEAD_DIMS.items())
        }

    def heads(self, x: np.ndarray):
        m = x.shape[0]
        out = np.empty((m, self.k, 11))
        caches = {}
        slices = {"opacity": _OPACITY, "color": _COLOR, "scale": _SCALE, "rot": _ROT}
        for name, dim in self.HEAD_DIMS.items():
            y, caches[name] = self.nets[name].forward(x)
            out[:, :, slices[name]] = y.reshape(m, self.k, dim)
        return out, caches

    def heads_backward(self, caches, d_heads: np.ndarray):
        m = d_heads.shape[0]
        d_x = np.zeros((m, self.feature_dim + self.IN_EXTRA))
        grads = {}
        slices = {"opacity": _OPACITY, "color": _COLOR, "scale": _SCALE, "rot": _ROT}
        for name, dim in self.HEAD_DIMS.items():
            d_y = d_heads[:, :, slices[name]].reshape(m, self.k * dim)
            d_xi, grads[name] = self.nets[name].backward(caches[name], d_y)
            d_x += d_xi
        return d_x, grads

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, net in self.nets.items():
            for k, v in net.params().items():
                out[f"{name}.{k}"] = v
        return out


@dataclass
class DropoutSchedule:
    """Level-aware dropout: rate gamma(l) * m / M with gamma(l) = 0.1 + 0.05 l."""

    total_steps: int

    @staticmethod
    def gamma(level: np.ndarray | int) -> np.ndarray | float:
        return 0.1 + 0.05 * np.asarray(level, dtype=np.float64)

    def rate(self, level: np.ndarray | int, step: int) -> np.ndarray | float:
        if not 0 <= step <= self.total_steps:
            raise ValueError("step outside schedule")
        r = self.gamma(level) * (step / self.total_steps)
        assert np.all(r < 1.0), "dropout rate must stay below 1"
        return r


def dropout_mask(
    levels: np.ndarray, step: int, sched: DropoutSchedule, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Per-Gaussian keep mask plus the survivor opacity compensation 1/(1-r)."""
    r = np.asarray(sched.rate(levels, step), dtype=np.float64)
    keep = rng.random(levels.shape[0]) >= r
    comp = 1.0 / (1.0 - r)
    return keep, comp


@dataclass
class NeuralGaussian:
    """One decoded Gaussian (test-facing convenience view)."""

    mu: np.ndarray
    scale: np.ndarray
    rot: np.ndarray
    opacity: float
    color: np.ndarray
    parent_anchor: int
    level: int


@dataclass
class DecodeCache:
    x: np.ndarray           # (m, 36) MLP input
    mlp_cache: object
    heads: np.ndarray       # (m, K, 11) raw head outputs
    dist: np.ndarray        # (m,)
    direction: np.ndarray   # (m, 3) unit camera->anchor
    voxel: np.ndarray       # (m,) per-anchor voxel size
    rot_unit: np.ndarray    # (m, K, 4)
    rot_norm: np.ndarray    # (m, K)
    opacity: np.ndarray     # (m, K)
    color: np.ndarray       # (m, K, 3)
    scale: np.ndarray       # (m, K, 3)
    d_max: float
    n_anchors: int
    k: int


@dataclass
class DecodeGrads:
    feature: np.ndarray     # (m, 32)
    offsets: np.ndarray     # (m, K, 3)
    raw_scales: np.ndarray  # (m, K, 3)
    center: np.ndarray      # (m, 3)
    mlp: dict


def decode_arrays(
    centers: np.ndarray,
    features: np.ndarray,
    offsets: np.ndarray,
    raw_scales: np.ndarray,
    levels: np.ndarray,
    voxel_sizes: np.ndarray,
    cam: Camera,
    mlp: SharedMLP | SeparateMLPs,
    d_max: float,
) -> tuple[GaussianBatch, DecodeCache]:
    """Decode a batch of anchors into m*K Gaussians (row-major by anchor)."""
    m, k = centers.shape[0], mlp.k
    diff = centers - cam.center
    dist = np.linalg.norm(diff, axis=-1)
    if np.any(dist <= 0.0):
        raise ValueError("non-positive viewing distance")
    direction = diff / dist[:, None]
    x = np.concatenate([features, (dist / d_max)[:, None], direction], axis=-1)

    heads, mlp_cache = mlp.heads(x)
    if not np.all(np.isfinite(heads)):
        raise FloatingPointError("decoder divergence")

    opacity = 1.0 / (1.0 + np.exp(-heads[:, :, 0]))
    color = 1.0 / (1.0 + np.exp(-heads[:, :, _COLOR]))
    mod = np.clip(heads[:, :, _SCALE], -SCALE_CLAMP, SCALE_CLAMP)
    scale = np.exp(raw_scales + mod)

    u = heads[:, :, _ROT].copy()
    u[:, :, 0] += 1.0
    rot_norm = np.linalg.norm(u, axis=-1)
    if np.any(rot_norm < 1e-12):
        raise FloatingPointError("decoder divergence")
    rot_unit = u / rot_norm[:, :, None]

    mu = centers[:, None, :] + offsets * voxel_sizes[:, None, None]

    batch = GaussianBatch(
        mu=mu.reshape(m * k, 3),
        scale=scale.reshape(m * k, 3),
        rot=rot_unit.reshape(m * k, 4),
        opacity=opacity.reshape(m * k),
        color=color.reshape(m * k, 3),
        anchor_row=np.repeat(np.arange(m), k),
        level=np.repeat(levels, k),
    )
    cache = DecodeCache(
        x=x, mlp_cache=mlp_cache, heads=heads, dist=dist, direction=direction,
        voxel=voxel_sizes, rot_unit=rot_unit, rot_norm=rot_norm,
        opacity=opacity, color=color, scale=scale, d_max=d_max,
        n_anchors=m, k=k,
    )
    return batch, cache


def decode_backward(
    cache: DecodeCache,
    mlp: SharedMLP | SeparateMLPs,
    d_mu: np.ndarray,
    d_scale: np.ndarray,
    d_rot: np.ndarray,
    d_opacity: np.ndarray,
    d_color: np.ndarray,
) -> DecodeGrads:
    """Exact reverse of `decode_arrays` for the given upstream gradients."""
    m, k = cache.n_anchors, cache.k
    if d_mu.shape[0] != m * k:
        raise ValueError("stale tape")
    d_mu = d_mu.reshape(m, k, 3)
    d_scale = d_scale.reshape(m, k, 3)
    d_rot = d_rot.reshape(m, k, 4)
    d_opacity = d_opacity.reshape(m, k)
    d_color = d_color.reshape(m, k, 3)

    d_heads = np.zeros((m, k, 11))
    d_heads[:, :, 0] = d_opacity * cache.opacity * (1.0 - cache.opacity)
    d_heads[:, :, _COLOR] = d_color * cache.color * (1.0 - cache.color)

    d_log = d_scale * cache.scale  # gradient w.r.t. raw_scales + clamped mod
    raw_mod = cache.heads[:, :, _SCALE]
    d_heads[:, :, _SCALE] = d_log * (np.abs(raw_mod) <= SCALE_CLAMP)

    d_u = normalize_backward(cache.rot_unit, d_rot, cache.rot_norm)
    d_heads[:, :, _ROT] = d_u

    d_offsets = d_mu * cache.voxel[:, None, None]
    d_center = d_mu.sum(axis=1)

    d_x, mlp_grads = mlp.heads_backward(cache.mlp_cache, d_heads)
    d_feature = d_x[:, : x_feature_dim(cache)]
    d_dist_norm = d_x[:, x_feature_dim(cache)]
    d_dir = d_x[:, x_feature_dim(cache) + 1:]

    # Chain the distance/direction inputs back to the anchor center.
    d_center += (d_dist_norm / cache.d_max)[:, None] * cache.direction
    d_center += normalize_backward(cache.direction, d_dir, cache.dist)

    return DecodeGrads(
        feature=d_feature, offsets=d_offsets, raw_scales=d_log,
        center=d_center, mlp=mlp_grads,
    )


def x_feature_dim(cache: DecodeCache) -> int:
    return cache.x.shape[1] - 4


def decode(anchor, cam: Camera, mlp: SharedMLP | SeparateMLPs, delta: float, d_max: float):
    """Decode a single anchor into a list of NeuralGaussian (test surface)."""
    voxel = delta / (2.0 ** anchor.level)
    batch, _ = decode_arrays(
        centers=anchor.center[None, :],
        features=anchor.feature[None, :],
        offsets=anchor.offsets[None, :, :],
        raw_scales=anchor.raw_scales[None, :, :],
        levels=np.array([anchor.level]),
        voxel_sizes=np.array([voxel]),
        cam=cam, mlp=mlp, d_max=d_max,
    )
    return [
        NeuralGaussian(
            mu=batch.mu[i], scale=batch.scale[i], rot=batch.rot[i],
            opacity=float(batch.opacity[i]), color=batch.color[i],
            parent_anchor=anchor.id, level=anchor.level,
        )
        for i in range(len(batch))
    ]
