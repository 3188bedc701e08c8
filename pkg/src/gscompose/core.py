"""Core geometric types: Gaussians, clouds, rigid transforms and pinhole cameras.

Conventions used throughout the package:

* right-handed world frame; cameras look down +z in camera space, image
  +x is right and +y is down, pixel centers sit on integer coordinates;
* depth is camera-space z, not ray length;
* quaternions are stored (w, x, y, z);
* scales are stored as log std-devs, opacity as a logit, color as linear RGB
  (degree-0 spherical harmonics only).
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.special import expit

from .errors import BehindCameraError, ConfigError, InvalidGaussianError

DEPTH_EPS = 1e-6


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def sigmoid(x):
    out = expit(np.asarray(x, dtype=np.float64))
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order.

    Quaternions are normalized first, so any non-zero scaling is accepted.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m) -> np.ndarray:
    xyzw = Rotation.from_matrix(np.asarray(m, dtype=np.float64)).as_quat()
    return np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product a * b for (..., 4) arrays in (w, x, y, z) order."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def check_rotation(r, name="rotation", tol=1e-9) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise ConfigError(f"{name} must be a finite 3x3 matrix")
    if np.max(np.abs(r @ r.T - np.eye(3))) > tol or abs(np.linalg.det(r) - 1.0) > tol:
        raise ConfigError(f"{name} is not a proper rotation (orthonormal, det +1)")
    return r


@dataclass(frozen=True)
class Gaussian3D:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray

    def __post_init__(self):
        vals = [self.position, self.log_scale, self.rotation, [self.opacity_logit], self.color]
        if not all(np.all(np.isfinite(np.asarray(v, dtype=np.float64))) for v in vals):
            raise InvalidGaussianError("Gaussian has non-finite fields")
        q = np.asarray(self.rotation, dtype=np.float64)
        n = np.linalg.norm(q)
        if n == 0:
            raise InvalidGaussianError("zero quaternion")
        if not np.all(np.isfinite(np.exp(np.asarray(self.log_scale, dtype=np.float64)))):
            raise InvalidGaussianError("scale overflows")
        object.__setattr__(self, "position", _frozen(self.position))
        object.__setattr__(self, "log_scale", _frozen(self.log_scale))
        object.__setattr__(self, "rotation", _frozen(q / n))
        object.__setattr__(self, "opacity_logit", float(self.opacity_logit))
        object.__setattr__(self, "color", _frozen(self.color))

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


def covariance_of(g: Gaussian3D) -> np.ndarray:
    """World-space covariance R diag(exp(s))^2 R^T of one Gaussian."""
    vals = [g.position, g.log_scale, g.rotation]
    if not all(np.all(np.isfinite(v)) for v in vals):
        raise InvalidGaussianError("non-finite Gaussian")
    return covariances(g.log_scale[None], g.rotation[None])[0]


def covariances(log_scales, rotations) -> np.ndarray:
    r = quat_to_matrix(rotations)
    m = r * np.exp(np.asarray(log_scales, dtype=np.float64))[..., None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    # exact symmetry; matmul can differ in the last bit across the diagonal
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    """Structure-of-arrays store for a set of Gaussians (one concept)."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    label: str = ""

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(pos)
        ls = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        rot = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        op = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        col = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        for name, a in (("positions", pos), ("log_scales", ls), ("rotations", rot),
                        ("opacity_logits", op), ("colors", col)):
            if not np.all(np.isfinite(a)):
                raise InvalidGaussianError(f"cloud {self.label!r}: non-finite {name}")
        norms = np.linalg.norm(rot, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise InvalidGaussianError(f"cloud {self.label!r}: zero quaternion")
        if n and not np.all(np.abs(norms - 1.0) <= 1e-12):
            rot = rot / norms
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "log_scales", _frozen(ls))
        object.__setattr__(self, "rotations", _frozen(rot))
        object.__setattr__(self, "opacity_logits", _frozen(op))
        object.__setattr__(self, "colors", _frozen(col))

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.positions[i], self.log_scales[i], self.rotations[i],
                          self.opacity_logits[i], self.colors[i])

    @classmethod
    def from_gaussians(cls, gaussians, label: str = "") -> "GaussianCloud":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty(label)
        return cls(
            positions=[g.position for g in gaussians],
            log_scales=[g.log_scale for g in gaussians],
            rotations=[g.rotation for g in gaussians],
            opacity_logits=[g.opacity_logit for g in gaussians],
            colors=[g.color for g in gaussians],
            label=label,
        )

    @classmethod
    def empty(cls, label: str = "") -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                   np.zeros(0), np.zeros((0, 3)), label)

    @classmethod
    def concatenate(cls, clouds, label: str = "") -> "GaussianCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty(label)
        return cls(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.log_scales for c in clouds]),
            np.concatenate([c.rotations for c in clouds]),
            np.concatenate([c.opacity_logits for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            label,
        )

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def covariances(self) -> np.ndarray:
        return covariances(self.log_scales, self.rotations)

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(self.positions[idx], self.log_scales[idx], self.rotations[idx],
                             self.opacity_logits[idx], self.colors[idx], self.label)

    def bounds(self):
        """Axis-aligned (min, max) corners of the Gaussian centers."""
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def bounding_sphere(self):
        lo, hi = self.bounds()
        center = 0.5 * (lo + hi)
        radius = float(np.max(np.linalg.norm(self.positions - center, axis=1)))
        return center, radius

    def recentered(self) -> "GaussianCloud":
        """Copy translated so the bounding-box center sits at the origin."""
        lo, hi = self.bounds()
        return GaussianCloud(self.positions - 0.5 * (lo + hi), self.log_scales, self.rotations,
                             self.opacity_logits, self.colors, self.label)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Similarity transform p -> uniform_scale * rotation @ p + translation."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    uniform_scale: float = 1.0

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ConfigError("translation must be finite")
        r = check_rotation(self.rotation)
        s = float(self.uniform_scale)
        if not (s > 0 and math.isfinite(s)):
            raise ConfigError(f"uniform_scale must be positive, got {s}")
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "uniform_scale", s)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def is_identity(self) -> bool:
        return (self.uniform_scale == 1.0 and not np.any(self.translation)
                and np.array_equal(self.rotation, np.eye(3)))

    def apply_points(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return self.uniform_scale * (p @ self.rotation.T) + self.translation

    def then(self, other: "RigidTransform") -> "RigidTransform":
        """The transform applying ``self`` first and ``other`` second."""
        return RigidTransform(
            translation=other.uniform_scale * other.rotation @ self.translation + other.translation,
            rotation=other.rotation @ self.rotation,
            uniform_scale=other.uniform_scale * self.uniform_scale,
        )

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.uniform_scale * self.rotation
        m[:3, 3] = self.translation
        return m


def apply_transform(cloud: GaussianCloud, T: RigidTransform) -> GaussianCloud:
    if T.is_identity():
        return cloud
    if len(cloud) == 0:
        return cloud
    q = matrix_to_quat(T.rotation)
    return GaussianCloud(
        positions=T.apply_points(cloud.positions),
        log_scales=cloud.log_scales + math.log(T.uniform_scale),
        rotations=quat_multiply(q[None, :], cloud.rotations),
        opacity_logits=cloud.opacity_logits,
        colors=cloud.colors,
        label=cloud.label,
    )


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    world_to_cam_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ConfigError(f"zero-area image {self.width}x{self.height}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ConfigError("principal point outside the image")
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "world_to_cam_rotation",
                           _frozen(check_rotation(self.world_to_cam_rotation, tol=1e-8)))
        t = np.asarray(self.world_to_cam_translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "world_to_cam_translation", _frozen(t))

    @classmethod
    def look_at(cls, eye, target, width=512, height=512, fov_y_deg=60.0, down=(0.0, 1.0, 0.0)):
        """Camera at ``eye`` looking at ``target``; ``down`` is the world direction
        that should appear as image +y."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(np.asarray(down, dtype=np.float64), forward)
        nr = np.linalg.norm(right)
        if nr < 1e-12:
            raise ConfigError("look_at: down vector parallel to viewing direction")
        right /= nr
        down_v = np.cross(forward, right)
        r = np.stack([right, down_v, forward])
        f = 0.5 * height / math.tan(math.radians(fov_y_deg) / 2)
        return cls(f, f, width / 2.0, height / 2.0, width, height, r, -r @ eye)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.world_to_cam_rotation.T @ self.world_to_cam_translation

    def with_pose(self, rotation, translation) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                      rotation, translation)

    def with_resolution(self, width: int, height: int) -> "Camera":
        """Same field of view at a different image size."""
        sx, sy = width / self.width, height / self.height
        return Camera(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height,
                      self.world_to_cam_rotation, self.world_to_cam_translation)

    def to_camera(self, p_world) -> np.ndarray:
        p = np.asarray(p_world, dtype=np.float64)
        return p @ self.world_to_cam_rotation.T + self.world_to_cam_translation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.world_to_cam_rotation.tolist(),
            "translation": self.world_to_cam_translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                       d.get("rotation", np.eye(3)), d.get("translation", np.zeros(3)))
        except KeyError as e:
            raise ConfigError(f"camera is missing field {e}") from None


def project_point(cam: Camera, p_world, eps: float = DEPTH_EPS):
    """Pinhole projection. Returns (pixel, depth) with depth = camera-space z."""
    X, Y, Z = cam.to_camera(p_world)
    if Z <= eps:
        raise BehindCameraError(f"point is behind the camera (z={Z:.3g})")
    return np.array([cam.fx * X / Z + cam.cx, cam.fy * Y / Z + cam.cy]), float(Z)


def unproject(cam: Camera, pixel, depth: float) -> np.ndarray:
    """Inverse of :func:`project_point`: world point at camera-space depth ``depth``."""
    u, v = np.asarray(pixel, dtype=np.float64)
    pc = np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])
    return cam.world_to_cam_rotation.T @ (pc - cam.world_to_cam_translation)


@dataclass(frozen=True)
class BBox2D:
    height_px: float
    width_px: float

    def __post_init__(self):
        if not (self.height_px > 0 and self.width_px > 0):
            raise ConfigError("bounding box dimensions must be positive")

    def check_fits(self, width: int, height: int):
        if self.height_px > height or self.width_px > width:
            raise ConfigError("bounding box larger than the image")


@dataclass(frozen=True)
class BBox3D:
    height_world: float
    width_world: float | None = None
    depth_world: float | None = None

    def __post_init__(self):
        if not self.height_world > 0:
            raise ConfigError("3D box height must be positive")


AXES = {
    "x": (1.0, 0.0, 0.0), "-x": (-1.0, 0.0, 0.0),
    "y": (0.0, 1.0, 0.0), "-y": (0.0, -1.0, 0.0),
    "z": (0.0, 0.0, 1.0), "-z": (0.0, 0.0, -1.0),
}


def axis_vector(up_axis: str) -> np.ndarray:
    """Unit vector of a signed axis name such as ``"-y"``."""
    try:
        return np.array(AXES[up_axis])
    except KeyError:
        raise ConfigError(f"unknown axis {up_axis!r}; expected one of {sorted(AXES)}") from None
