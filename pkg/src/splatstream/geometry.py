"""Quaternions, covariances, pinhole cameras, and the splat projection math.

Everything here is a pure function over numpy arrays (float64 throughout).
Batched variants carry a leading axis and are what the training loop uses;
the scalar variants exist for clarity and for direct testing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Anti-aliasing floor added to the projected covariance diagonal (pixel^2).
# Prevents sub-pixel splats from producing near-singular 2D covariances.
COV2D_DILATION = 0.3


def normalize_quat(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit length. Raises on (near-)zero input."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("degenerate quaternion")
    return q / n


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of the normalized quaternion (w, x, y, z).

    Works for a single quaternion (4,) -> (3, 3) or a batch (G, 4) -> (G, 3, 3).
    """
    q = normalize_quat(q)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    r[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[:, 0, 1] = 2.0 * (x * y - w * z)
    r[:, 0, 2] = 2.0 * (x * z + w * y)
    r[:, 1, 0] = 2.0 * (x * y + w * z)
    r[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[:, 1, 2] = 2.0 * (y * z - w * x)
    r[:, 2, 0] = 2.0 * (x * z - w * y)
    r[:, 2, 1] = 2.0 * (y * z + w * x)
    r[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return r[0] if single else r


def _rotation_backward_unit(q: np.ndarray, d_r: np.ndarray) -> np.ndarray:
    """Gradient of sum(dR * R(q)) w.r.t. a unit quaternion. Batched (G, 4)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = d_r  # (G, 3, 3)
    dw = 2.0 * (
        -z * g[:, 0, 1] + y * g[:, 0, 2]
        + z * g[:, 1, 0] - x * g[:, 1, 2]
        - y * g[:, 2, 0] + x * g[:, 2, 1]
    )
    dx = 2.0 * (
        y * g[:, 0, 1] + z * g[:, 0, 2]
        + y * g[:, 1, 0] - 2.0 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2.0 * x * g[:, 2, 2]
    )
    dy = 2.0 * (
        -2.0 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2]
        + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2.0 * y * g[:, 2, 2]
    )
    dz = 2.0 * (
        -2.0 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2]
        + w * g[:, 1, 0] - 2.0 * z * g[:, 1, 1] + y * g[:, 1, 2]
        + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    return np.stack([dw, dx, dy, dz], axis=-1)


def normalize_backward(unit: np.ndarray, d_unit: np.ndarray, norm: np.ndarray) -> np.ndarray:
    """Gradient through v -> v/|v| given the normalized value and |v|."""
    dot = np.sum(unit * d_unit, axis=-1, keepdims=True)
    return (d_unit - unit * dot) / norm[..., None]


def build_covariance(s: np.ndarray, q: np.ndarray) -> np.ndarray:
    """3D covariance R(q) diag(s^2) R(q)^T for positive per-axis scales."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0.0):
        raise ValueError("non-positive scale")
    r = quat_to_rotation(q)
    single = r.ndim == 2
    r = r.reshape(-1, 3, 3)
    s2 = np.atleast_2d(s) ** 2
    cov = np.einsum("gij,gj,gkj->gik", r, s2, r)
    return cov[0] if single else cov


def covariance_backward(
    s: np.ndarray, r: np.ndarray, d_cov: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (d_s, d_R) for cov = R diag(s^2) R^T given a full-matrix d_cov."""
    d_sym = 0.5 * (d_cov + np.swapaxes(d_cov, -1, -2))
    rt_g_r = np.einsum("gji,gjk,gkl->gil", r, d_sym, r)
    d_s2 = np.einsum("gii->gi", rt_g_r)
    d_s = 2.0 * s * d_s2
    d_r = 2.0 * np.einsum("gij,gjk,gk->gik", d_sym, r, s * s)
    return d_s, d_r


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-to-camera rigid transform.

    Convention: x right, y down, z forward in camera space; pixel (row i,
    col j) samples at (j + 0.5, i + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) world -> camera
    translation: np.ndarray  # (3,)
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.near <= 0:
            raise ValueError("near plane must be positive")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T t."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "width": self.width,
            "height": self.height,
            "near": self.near,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64),
            translation=np.asarray(d["translation"], dtype=np.float64),
            width=int(d["width"]),
            height=int(d["height"]),
            near=float(d.get("near", 0.01)),
        )


def look_at_camera(
    position: np.ndarray,
    target: np.ndarray,
    width: int,
    height: int,
    fov_deg: float = 60.0,
    near: float = 0.01,
    up: np.ndarray = (0.0, 0.0, 1.0),
) -> Camera:
    """Camera at `position` looking toward `target`, z-up world."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:  # looking straight along up: pick another reference
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        rn = np.linalg.norm(right)
    right = right / rn
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    trans = -rot @ position
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
    return Camera(
        fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
        rotation=rot, translation=trans, width=width, height=height, near=near,
    )


def project_gaussian(mu: np.ndarray, sigma: np.ndarray, cam: Camera):
    """EWA-style projection of one Gaussian.

    Returns (mean2d, cov2d (2, 2), depth), or None when the point is culled
    at the near plane.
    """
    mu = np.asarray(mu, dtype=np.float64)
    p = cam.rotation @ mu + cam.translation
    if p[2] <= cam.near:
        return None
    x, y, z = p
    mean2d = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    j = np.array([
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ])
    v = j @ cam.rotation
    cov2d = v @ np.asarray(sigma, dtype=np.float64) @ v.T
    cov2d = cov2d + COV2D_DILATION * np.eye(2)
    return mean2d, cov2d, z


@dataclass
class ProjectionCache:
    """Everything the projection backward pass needs, batched over Gaussians."""

    mean2d: np.ndarray      # (G, 2)
    cov2d: np.ndarray       # (G, 3) as (m11, m12, m22), dilation included
    depth: np.ndarray       # (G,)
    valid: np.ndarray       # (G,) bool, False = culled at the near plane
    p_cam: np.ndarray       # (G, 3)
    rot_unit: np.ndarray    # (G, 4) normalized quaternion
    rot_norm: np.ndarray    # (G,) norm of the raw quaternion
    rot_mat: np.ndarray     # (G, 3, 3)
    scale: np.ndarray       # (G, 3)
    sigma: np.ndarray       # (G, 3, 3)
    v: np.ndarray           # (G, 2, 3) = J @ W


def project_gaussians(
    mu: np.ndarray, scale: np.ndarray, rot: np.ndarray, cam: Camera
) -> ProjectionCache:
    """Batched projection from (position, scale, quaternion) parameters."""
    mu = np.asarray(mu, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    rot = np.asarray(rot, dtype=np.float64)
    g = mu.shape[0]

    p = mu @ cam.rotation.T + cam.translation
    valid = p[:, 2] > cam.near
    z = np.where(valid, p[:, 2], 1.0)  # placeholder depth for culled rows
    x, y = p[:, 0], p[:, 1]

    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=-1)

    rn = np.linalg.norm(rot, axis=-1)
    if np.any(rn < 1e-12):
        raise ValueError("degenerate quaternion")
    rot_unit = rot / rn[:, None]
    rmat = quat_to_rotation(rot_unit)
    sigma = np.einsum("gij,gj,gkj->gik", rmat, scale * scale, rmat)

    j = np.zeros((g, 2, 3), dtype=np.float64)
    j[:, 0, 0] = cam.fx / z
    j[:, 0, 2] = -cam.fx * x / (z * z)
    j[:, 1, 1] = cam.fy / z
    j[:, 1, 2] = -cam.fy * y / (z * z)
    v = np.einsum("gij,jk->gik", j, cam.rotation)

    m = np.einsum("gij,gjk,glk->gil", v, sigma, v)
    cov2d = np.stack([
        m[:, 0, 0] + COV2D_DILATION,
        m[:, 0, 1],
        m[:, 1, 1] + COV2D_DILATION,
    ], axis=-1)

    return ProjectionCache(
        mean2d=mean2d, cov2d=cov2d, depth=p[:, 2], valid=valid,
        p_cam=p, rot_unit=rot_unit, rot_norm=rn, rot_mat=rmat,
        scale=scale, sigma=sigma, v=v,
    )


def project_gaussians_backward(
    cache: ProjectionCache,
    cam: Camera,
    d_mean2d: np.ndarray,
    d_cov2d: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_mu, d_scale, d_rot) of the batched projection.

    `d_cov2d` uses the (m11, m12, m22) parameterization with the off-diagonal
    counted once. Culled Gaussians receive zero gradients.
    """
    ok = cache.valid
    d_mean2d = np.where(ok[:, None], d_mean2d, 0.0)
    d_cov2d = np.where(ok[:, None], d_cov2d, 0.0)

    # Full-matrix gradient of the symmetric 2x2 covariance.
    g_full = np.empty((d_cov2d.shape[0], 2, 2), dtype=np.float64)
    g_full[:, 0, 0] = d_cov2d[:, 0]
    g_full[:, 0, 1] = 0.5 * d_cov2d[:, 1]
    g_full[:, 1, 0] = 0.5 * d_cov2d[:, 1]
    g_full[:, 1, 1] = d_cov2d[:, 2]

    v, sigma = cache.v, cache.sigma
    d_sigma = np.einsum("gji,gjk,gkl->gil", v, g_full, v)
    d_v = 2.0 * np.einsum("gij,gjk,gkl->gil", g_full, v, sigma)
    d_j = np.einsum("gij,kj->gik", d_v, cam.rotation)

    x, y = cache.p_cam[:, 0], cache.p_cam[:, 1]
    z = np.where(ok, cache.p_cam[:, 2], 1.0)
    fx, fy = cam.fx, cam.fy
    z2 = z * z

    # Mean gradient through the perspective division.
    du, dv = d_mean2d[:, 0], d_mean2d[:, 1]
    dp = np.zeros_like(cache.p_cam)
    dp[:, 0] = du * fx / z
    dp[:, 1] = dv * fy / z
    dp[:, 2] = -du * fx * x / z2 - dv * fy * y / z2

    # Covariance gradient through the Jacobian's dependence on the mean.
    dp[:, 0] += d_j[:, 0, 2] * (-fx / z2)
    dp[:, 1] += d_j[:, 1, 2] * (-fy / z2)
    dp[:, 2] += (
        d_j[:, 0, 0] * (-fx / z2)
        + d_j[:, 1, 1] * (-fy / z2)
        + d_j[:, 0, 2] * (2.0 * fx * x / (z2 * z))
        + d_j[:, 1, 2] * (2.0 * fy * y / (z2 * z))
    )

    d_mu = dp @ cam.rotation

    d_scale, d_rmat = covariance_backward(cache.scale, cache.rot_mat, d_sigma)
    d_rot_unit = _rotation_backward_unit(cache.rot_unit, d_rmat)
    d_rot = normalize_backward(cache.rot_unit, d_rot_unit, cache.rot_norm)

    d_mu = np.where(ok[:, None], d_mu, 0.0)
    d_scale = np.where(ok[:, None], d_scale, 0.0)
    d_rot = np.where(ok[:, None], d_rot, 0.0)
    return d_mu, d_scale, d_rot
