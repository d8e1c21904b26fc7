"""Shared fixtures and builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from splatstream.geometry import Camera
from splatstream.rasterizer import GaussianBatch


def make_camera(width=32, height=32, fx=40.0, fy=40.0, near=0.01,
                rotation=None, translation=None) -> Camera:
    return Camera(
        fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0,
        rotation=np.eye(3) if rotation is None else rotation,
        translation=np.zeros(3) if translation is None else translation,
        width=width, height=height, near=near,
    )


def random_batch(rng: np.random.Generator, n: int, depth_lo=1.5, depth_hi=5.0,
                 spread=1.0) -> GaussianBatch:
    """Random Gaussians in front of an identity camera, distinct depths."""
    depths = rng.uniform(depth_lo, depth_hi, n) + np.arange(n) * 1e-3
    return GaussianBatch(
        mu=np.column_stack([
            rng.uniform(-spread, spread, n),
            rng.uniform(-spread, spread, n),
            depths,
        ]),
        scale=rng.uniform(0.02, 0.5, (n, 3)),
        rot=rng.normal(size=(n, 4)),
        opacity=rng.uniform(0.05, 0.95, n),
        color=rng.uniform(0.0, 1.0, (n, 3)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def static_scene_spec(seed=5, frames=1, views=4, size=32):
    return {
        "seed": seed,
        "frames": frames,
        "image_size": size,
        "cameras": {"count": views, "radius": 1.8, "height": 0.7,
                    "look_at": [0, 0, 0], "fov_deg": 55},
        "elements": [
            {"center": [0, 0, 0], "scale": 0.35, "color": [0.9, 0.25, 0.2],
             "opacity": 0.92},
            {"center": [0.55, 0.3, 0.1], "scale": 0.22, "color": [0.2, 0.5, 0.9],
             "opacity": 0.9},
            {"center": [-0.4, -0.35, -0.15], "scale": 0.25, "color": [0.3, 0.85, 0.3],
             "opacity": 0.9},
        ],
        "points_per_element": 120,
    }


def dynamic_scene_spec(seed=9, frames=10, views=4, size=32, velocity=0.04):
    spec = static_scene_spec(seed=seed, frames=frames, views=views, size=size)
    spec["elements"].append({
        "center": [0.15, -0.55, 0.35], "scale": 0.16,
        "color": [0.95, 0.85, 0.15], "opacity": 0.93,
        "velocity": [velocity, 0.0, 0.0],
    })
    return spec
