"""splatstream: streamed free-viewpoint video on an LoD anchor-Gaussian scene.

A scene is an octree-organized hierarchy of anchors, each decoding into K
Gaussians through a shared MLP. Frame 0 trains the full model; every later
frame ships only quantized residuals for the anchors a gradient-driven GMM
partition marked as dynamic.
"""

__version__ = "0.1.0"

from .anchors import Anchor, LoDConfig, LoDHierarchy, init_hierarchy
from .geometry import Camera
from .rasterizer import GaussianBatch, RenderSettings, render
from .trainer import SceneModel, TrainConfig

__all__ = [
    "Anchor",
    "Camera",
    "GaussianBatch",
    "LoDConfig",
    "LoDHierarchy",
    "RenderSettings",
    "SceneModel",
    "TrainConfig",
    "init_hierarchy",
    "render",
    "__version__",
]
