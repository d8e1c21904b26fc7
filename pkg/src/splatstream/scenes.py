"""Synthetic multi-view video scenes with known geometry and motion.

A scene is a handful of colored Gaussian blobs (flattened blobs double as
walls/planes), some of which translate rigidly frame to frame. Ground-truth
images come from the brute-force compositor so renderer bugs cannot leak
into the data, and every frame carries per-view dynamic pixel masks plus the
3D bounds of the moving elements.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, look_at_camera, project_gaussians
from .rasterizer import GaussianBatch, RenderSettings
from .reference import reference_render

MASK_SUPPORT_SIGMA = 3.0


@dataclass
class SceneElement:
    center: np.ndarray             # (3,)
    scale: np.ndarray              # (3,) axis scales
    color: np.ndarray              # (3,)
    opacity: float = 0.9
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def dynamic(self) -> bool:
        return bool(np.any(self.velocity != 0.0))

    def center_at(self, t: int) -> np.ndarray:
        return self.center + t * self.velocity


@dataclass
class SceneSpec:
    seed: int
    frames: int
    image_size: tuple[int, int]     # (height, width)
    n_cameras: int
    ring_radius: float
    ring_height: float
    look_at: np.ndarray
    fov_deg: float
    near: float
    elements: list[SceneElement]
    points_per_element: int = 150

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        cams = d.get("cameras", {})
        elements = [
            SceneElement(
                center=np.asarray(e["center"], dtype=np.float64),
                scale=np.broadcast_to(
                    np.asarray(e["scale"], dtype=np.float64), (3,)
                ).copy(),
                color=np.asarray(e["color"], dtype=np.float64),
                opacity=float(e.get("opacity", 0.9)),
                rotation=np.asarray(e.get("rotation", [1, 0, 0, 0]), dtype=np.float64),
                velocity=np.asarray(e.get("velocity", [0, 0, 0]), dtype=np.float64),
            )
            for e in d.get("elements", [])
        ]
        size = d.get("image_size", 32)
        if isinstance(size, int):
            size = (size, size)
        return cls(
            seed=int(d.get("seed", 0)),
            frames=int(d.get("frames", 1)),
            image_size=(int(size[0]), int(size[1])),
            n_cameras=int(cams.get("count", 4)),
            ring_radius=float(cams.get("radius", 2.0)),
            ring_height=float(cams.get("height", 0.5)),
            look_at=np.asarray(cams.get("look_at", [0, 0, 0]), dtype=np.float64),
            fov_deg=float(cams.get("fov_deg", 60.0)),
            near=float(cams.get("near", 0.01)),
            elements=elements,
            points_per_element=int(d.get("points_per_element", 150)),
        )

    @classmethod
    def from_json(cls, path) -> "SceneSpec":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def validate(self):
        if not self.elements:
            raise ValueError("empty scene spec")
        if self.n_cameras < 2:
            raise ValueError("need at least two cameras")
        if self.frames < 1:
            raise ValueError("need at least one frame")


@dataclass
class SyntheticScene:
    spec: SceneSpec
    cameras: list[Camera]
    images: np.ndarray            # (T, N, H, W, 3)
    masks: np.ndarray             # (T, N, H, W) bool
    points: np.ndarray            # (P, 3)
    dynamic_bounds: list[dict]    # per mover: center, radius, velocity


def build_cameras(spec: SceneSpec) -> list[Camera]:
    h, w = spec.image_size
    cams = []
    for i in range(spec.n_cameras):
        theta = 2.0 * np.pi * i / spec.n_cameras
        pos = spec.look_at + np.array([
            spec.ring_radius * np.cos(theta),
            spec.ring_radius * np.sin(theta),
            spec.ring_height,
        ])
        cams.append(look_at_camera(
            pos, spec.look_at, width=w, height=h,
            fov_deg=spec.fov_deg, near=spec.near,
        ))
    return cams


def elements_at(spec: SceneSpec, t: int) -> GaussianBatch:
    """Ground-truth Gaussians of frame t."""
    n = len(spec.elements)
    mu = np.stack([e.center_at(t) for e in spec.elements])
    return GaussianBatch(
        mu=mu,
        scale=np.stack([e.scale for e in spec.elements]),
        rot=np.stack([e.rotation for e in spec.elements]),
        opacity=np.array([e.opacity for e in spec.elements]),
        color=np.stack([e.color for e in spec.elements]),
        level=np.zeros(n, dtype=np.int64),
    )


def _support_mask(cam: Camera, batch: GaussianBatch, rows: list[int],
                  h: int, w: int) -> np.ndarray:
    """Pixels inside the projected 3-sigma ellipse of the given Gaussians."""
    mask = np.zeros((h, w), dtype=bool)
    if not rows:
        return mask
    proj = project_gaussians(batch.mu, batch.scale, batch.rot, cam)
    xs = np.arange(w, dtype=np.float64) + 0.5
    ys = np.arange(h, dtype=np.float64) + 0.5
    px, py = np.meshgrid(xs, ys)
    for i in rows:
        if not proj.valid[i]:
            continue
        m11, m12, m22 = proj.cov2d[i]
        det = m11 * m22 - m12 * m12
        if det <= 0:
            continue
        a, b, c = m22 / det, -m12 / det, m11 / det
        dx = px - proj.mean2d[i, 0]
        dy = py - proj.mean2d[i, 1]
        q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        mask |= q <= MASK_SUPPORT_SIGMA ** 2
    return mask


def generate_scene(spec: SceneSpec, seed: int | None = None,
                   settings: RenderSettings | None = None) -> SyntheticScene:
    """Render ground-truth images, masks, and an initial point cloud."""
    spec.validate()
    if seed is not None:
        spec.seed = seed
    if settings is None:
        settings = RenderSettings()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5CE]))
    cams = build_cameras(spec)
    h, w = spec.image_size
    t_total, n = spec.frames, spec.n_cameras

    images = np.empty((t_total, n, h, w, 3), dtype=np.float64)
    masks = np.zeros((t_total, n, h, w), dtype=bool)
    dyn_rows = [i for i, e in enumerate(spec.elements) if e.dynamic]

    for t in range(t_total):
        batch_t = elements_at(spec, t)
        batch_0 = elements_at(spec, 0)
        for i, cam in enumerate(cams):
            images[t, i] = reference_render(batch_t, cam, settings)
            if dyn_rows and t > 0:
                masks[t, i] = (
                    _support_mask(cam, batch_t, dyn_rows, h, w)
                    | _support_mask(cam, batch_0, dyn_rows, h, w)
                )
            elif dyn_rows:
                masks[t, i] = _support_mask(cam, batch_t, dyn_rows, h, w)

    # Initial point cloud sampled around frame-0 element surfaces.
    pts = []
    for e in spec.elements:
        pts.append(e.center + rng.normal(0.0, 1.0, (spec.points_per_element, 3)) * e.scale)
    points = np.concatenate(pts, axis=0)

    dynamic_bounds = [
        {
            "center": spec.elements[i].center.tolist(),
            "radius": float(3.0 * np.max(spec.elements[i].scale)),
            "velocity": spec.elements[i].velocity.tolist(),
        }
        for i in dyn_rows
    ]
    return SyntheticScene(
        spec=spec, cameras=cams, images=images, masks=masks,
        points=points, dynamic_bounds=dynamic_bounds,
    )


def scene_bounds(points: np.ndarray, cameras: list[Camera]) -> tuple[float, float]:
    """Default (d_max, d_min): camera-to-point distance extremes."""
    d_max, d_min = 0.0, np.inf
    for cam in cameras:
        d = np.linalg.norm(points - cam.center, axis=-1)
        d_max = max(d_max, float(d.max()))
        d_min = min(d_min, float(d.min()))
    return d_max, d_min


def mover_anchor_ids(hierarchy, bounds: list[dict]) -> np.ndarray:
    """Anchors whose center lies inside any mover's canonical 3D bound."""
    if not bounds:
        return np.empty(0, dtype=np.int64)
    hit = np.zeros(len(hierarchy), dtype=bool)
    for b in bounds:
        center = np.asarray(b["center"], dtype=np.float64)
        dist = np.linalg.norm(hierarchy.centers - center, axis=-1)
        hit |= dist <= b["radius"]
    return hierarchy.ids[hit]
