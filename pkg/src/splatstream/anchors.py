"""Octree-organized anchor hierarchy with distance-based level selection.

Levels halve the voxel size: level l uses voxels of size delta / 2^l, and a
point cloud seeds one anchor per occupied voxel per level. Rendering selects
anchors by comparing their stored level against a view-dependent target
level; anchors whose accumulated screen gradient crosses a threshold are
promoted (they stay eligible one level deeper), and anchors whose decoded
opacity stays low are pruned.

All half-way rounding is round-half-to-even (np.rint).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Camera

FEATURE_DIM = 32
OFFSET_JITTER = 0.25  # initial offset magnitude, in voxel units


@dataclass
class LoDConfig:
    delta: float = 0.001          # base voxel size at level 0
    levels: int = 1               # L
    d_max: float = 1.0
    d_min: float = 1.0
    beta: float = 2.0             # level-transition base (fixed to 2)
    d0: float = 1.0               # base distance, tied to d_max
    l_max: int = 0                # current maximum active level
    k: int = 10                   # Gaussians per anchor
    grad_threshold: float = 2e-4  # promotion threshold, normalized-pixel units
    delta_l: int = 1              # level increment on promotion
    opacity_prune: float = 0.05
    feature_dim: int = FEATURE_DIM

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("base voxel size must be positive")
        if not (self.d_max >= self.d_min > 0):
            raise ValueError("degenerate bounds")
        if not (0 <= self.l_max <= self.levels - 1):
            raise ValueError("l_max outside [0, L)")
        if self.k < 1:
            raise ValueError("K must be >= 1")

    @classmethod
    def from_bounds(cls, d_max: float, d_min: float, **overrides) -> "LoDConfig":
        if d_max <= 0 or d_min <= 0 or d_max < d_min:
            raise ValueError("degenerate bounds")
        levels = int(np.rint(np.log2(d_max / d_min))) + 1
        cfg = dict(
            d_max=float(d_max), d_min=float(d_min), d0=float(d_max), levels=levels
        )
        cfg.update(overrides)
        return cls(**cfg)

    def voxel_size(self, level: np.ndarray | int) -> np.ndarray | float:
        return self.delta / (2.0 ** np.asarray(level, dtype=np.float64))


@dataclass
class Anchor:
    """Snapshot view of one anchor (the hierarchy stores arrays internally)."""

    id: int
    center: np.ndarray
    level: int
    feature: np.ndarray
    offsets: np.ndarray
    raw_scales: np.ndarray
    dynamic: bool
    promoted: bool
    grad_accum: float
    opacity_accum: float
    visibility_count: int


def anchor_base_level(d_max: float, dist: float, levels: int) -> int:
    """Round-half-even of log2(d_max / dist), clamped to [0, levels)."""
    if dist <= 0:
        raise ValueError("non-positive viewing distance")
    raw = int(np.rint(np.log2(d_max / dist)))
    return int(np.clip(raw, 0, levels - 1))


class LoDHierarchy:
    """Layered anchor sets with a per-level voxel index."""

    def __init__(self, config: LoDConfig):
        self.config = config
        k, fd = config.k, config.feature_dim
        self.ids = np.empty(0, dtype=np.int64)
        self.levels = np.empty(0, dtype=np.int32)
        self.centers = np.empty((0, 3), dtype=np.float64)
        self.features = np.empty((0, fd), dtype=np.float64)
        self.offsets = np.empty((0, k, 3), dtype=np.float64)
        self.raw_scales = np.empty((0, k, 3), dtype=np.float64)
        self.dynamic = np.empty(0, dtype=bool)
        self.promoted = np.empty(0, dtype=bool)
        self.grad_sum = np.empty(0, dtype=np.float64)
        self.grad_count = np.empty(0, dtype=np.int64)
        self.opacity_sum = np.empty(0, dtype=np.float64)
        self.opacity_count = np.empty(0, dtype=np.int64)
        self.visibility_count = np.empty(0, dtype=np.int64)
        self._index: dict[tuple[int, int, int, int], int] = {}
        self._next_id = 0

    def __len__(self) -> int:
        return self.ids.shape[0]

    # -- construction ------------------------------------------------------

    @classmethod
    def from_points(cls, points: np.ndarray, config: LoDConfig) -> "LoDHierarchy":
        points = np.asarray(points, dtype=np.float64)
        if points.size == 0:
            raise ValueError("empty scene")
        h = cls(config)
        rows = []
        for level in range(config.levels):
            voxel = config.voxel_size(level)
            coords = np.unique(np.floor(points / voxel).astype(np.int64), axis=0)
            # Lexicographic order keeps anchor ids deterministic.
            order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
            for c in coords[order]:
                rows.append((level, tuple(int(v) for v in c), (c + 0.5) * voxel))
        n = len(rows)
        k, fd = config.k, config.feature_dim
        h.ids = np.arange(n, dtype=np.int64)
        h._next_id = n
        h.levels = np.array([r[0] for r in rows], dtype=np.int32)
        h.centers = np.array([r[2] for r in rows], dtype=np.float64)
        h.features = np.zeros((n, fd), dtype=np.float64)
        h.offsets = np.empty((n, k, 3), dtype=np.float64)
        for i in range(n):
            rng = np.random.default_rng(np.random.SeedSequence(int(h.ids[i])))
            h.offsets[i] = rng.uniform(-OFFSET_JITTER, OFFSET_JITTER, size=(k, 3))
        voxel_sizes = config.voxel_size(h.levels)
        h.raw_scales = np.broadcast_to(
            np.log(0.5 * voxel_sizes)[:, None, None], (n, k, 3)
        ).copy()
        h.dynamic = np.zeros(n, dtype=bool)
        h.promoted = np.zeros(n, dtype=bool)
        h.grad_sum = np.zeros(n, dtype=np.float64)
        h.grad_count = np.zeros(n, dtype=np.int64)
        h.opacity_sum = np.zeros(n, dtype=np.float64)
        h.opacity_count = np.zeros(n, dtype=np.int64)
        h.visibility_count = np.zeros(n, dtype=np.int64)
        for i, (level, coord, _) in enumerate(rows):
            h._index[(level, *coord)] = int(h.ids[i])
        # Hold every checkpoint-f32 field at f32 precision from the start so
        # save/load round trips reproduce the in-memory model exactly.
        h.snap_to_storage()
        return h

    # -- views -------------------------------------------------------------

    def row_of(self, anchor_id: int) -> int:
        rows = np.nonzero(self.ids == anchor_id)[0]
        if rows.size == 0:
            raise KeyError(f"unknown anchor id {anchor_id}")
        return int(rows[0])

    def anchor(self, anchor_id: int) -> Anchor:
        i = self.row_of(anchor_id)
        gc, oc = self.grad_count[i], self.opacity_count[i]
        return Anchor(
            id=int(self.ids[i]),
            center=self.centers[i].copy(),
            level=int(self.levels[i]),
            feature=self.features[i].copy(),
            offsets=self.offsets[i].copy(),
            raw_scales=self.raw_scales[i].copy(),
            dynamic=bool(self.dynamic[i]),
            promoted=bool(self.promoted[i]),
            grad_accum=float(self.grad_sum[i] / gc) if gc else 0.0,
            opacity_accum=float(self.opacity_sum[i] / oc) if oc else 0.0,
            visibility_count=int(self.visibility_count[i]),
        )

    def voxel_sizes(self) -> np.ndarray:
        return self.config.voxel_size(self.levels)

    def level_counts(self) -> np.ndarray:
        return np.bincount(self.levels, minlength=self.config.levels)

    # -- LoD selection -----------------------------------------------------

    def target_levels(self, cam: Camera) -> np.ndarray:
        """Per-anchor view-dependent target level (base + promotion bonus)."""
        dist = np.linalg.norm(self.centers - cam.center, axis=-1)
        if np.any(dist <= 0.0):
            raise ValueError("non-positive viewing distance")
        base = np.clip(
            np.rint(np.log2(self.config.d_max / dist)).astype(np.int64),
            0, self.config.levels - 1,
        )
        return base + self.config.delta_l * self.promoted

    def select_mask(self, cam: Camera) -> np.ndarray:
        target = np.minimum(self.target_levels(cam), self.config.l_max)
        return self.levels <= target

    def select_anchors(self, cam: Camera) -> np.ndarray:
        """Ids of anchors eligible for rendering from this camera."""
        return self.ids[self.select_mask(cam)]

    # -- gradient-driven refinement ----------------------------------------

    def accumulate(self, rows: np.ndarray, screen_grad: np.ndarray, opacity: np.ndarray):
        """Fold one render's per-anchor statistics into the running windows."""
        self.grad_sum[rows] += screen_grad
        self.grad_count[rows] += 1
        self.opacity_sum[rows] += opacity
        self.opacity_count[rows] += 1

    def promote_levels(self, cam: Camera) -> int:
        """Flag anchors whose windowed gradient mean crosses the threshold."""
        mean = np.where(
            self.grad_count > 0, self.grad_sum / np.maximum(self.grad_count, 1), 0.0
        )
        hot = mean > self.config.grad_threshold
        self.promoted |= hot
        return int(np.count_nonzero(hot))

    def prune_anchors(self) -> int:
        """Drop anchors whose windowed opacity mean fell below the threshold."""
        seen = self.opacity_count > 0
        mean = np.where(seen, self.opacity_sum / np.maximum(self.opacity_count, 1), np.inf)
        drop = seen & (mean < self.config.opacity_prune)
        n_drop = int(np.count_nonzero(drop))
        if n_drop:
            self._drop_rows(np.nonzero(drop)[0])
        self.reset_windows()
        return n_drop

    def reset_windows(self):
        self.grad_sum[:] = 0.0
        self.grad_count[:] = 0
        self.opacity_sum[:] = 0.0
        self.opacity_count[:] = 0

    def _drop_rows(self, rows: np.ndarray):
        keep = np.ones(len(self), dtype=bool)
        keep[rows] = False
        for name in (
            "ids", "levels", "centers", "features", "offsets", "raw_scales",
            "dynamic", "promoted", "grad_sum", "grad_count",
            "opacity_sum", "opacity_count", "visibility_count",
        ):
            setattr(self, name, getattr(self, name)[keep])
        self.rebuild_index()

    def rebuild_index(self):
        self._index = {}
        voxel = self.voxel_sizes()
        coords = np.rint(self.centers / voxel[:, None] - 0.5).astype(np.int64)
        for i in range(len(self)):
            key = (int(self.levels[i]), *map(int, coords[i]))
            self._index[key] = int(self.ids[i])

    def voxel_index(self) -> dict[tuple[int, int, int, int], int]:
        return dict(self._index)

    def snap_to_storage(self):
        """Round every field the checkpoint stores as f32, so in-memory state
        matches a save/load round trip exactly."""
        for name in ("centers", "features", "offsets", "raw_scales"):
            arr = getattr(self, name)
            setattr(self, name, arr.astype(np.float32).astype(np.float64))


def init_hierarchy(
    points: np.ndarray, bounds: tuple[float, float], **overrides
) -> LoDHierarchy:
    """Build the hierarchy from a point cloud and (d_max, d_min) bounds."""
    d_max, d_min = bounds
    config = LoDConfig.from_bounds(d_max, d_min, **overrides)
    return LoDHierarchy.from_points(points, config)


def promote_levels(h: LoDHierarchy, cam: Camera) -> int:
    return h.promote_levels(cam)


def prune_anchors(h: LoDHierarchy) -> int:
    return h.prune_anchors()


def select_anchors(h: LoDHierarchy, cam: Camera) -> np.ndarray:
    return h.select_anchors(cam)
