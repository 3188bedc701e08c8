"""Placement refinement: bounded scale/location parameters tuned by image-space
guidance gradients, plus closed-form heading rotations."""
from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np

from .core import (
    BBox2D, Camera, GaussianCloud, RigidTransform, apply_transform, axis_vector, sigmoid,
)
from .errors import (
    ConfigError, GradientInvalid, RefinementDiverged, RenderError, RotationDegenerate,
)
from .rasterizer import Framebuffer, Splats, project_cloud, render_splats

log = logging.getLogger(__name__)

FACING = np.array([0.0, 0.0, 1.0])
DIR_EPS = 1e-6
DIVERGENCE_LIMIT = 50.0


# ----------------------------------------------------------------------------
# bounded parameterization


def bounded_offset(raw, tau: float):
    """``tau * sigmoid(raw) - tau / 2``, kept strictly inside (-tau/2, tau/2).

    Written as a tanh so that raw = 0 gives exactly 0; the final clip only
    matters once the sigmoid saturates in floating point.
    """
    raw = np.asarray(raw, dtype=np.float64)
    half = 0.5 * float(tau)
    bound = np.nextafter(half, 0.0)
    out = np.clip(half * np.tanh(0.5 * raw), -bound, bound)
    return out if out.ndim else float(out)


def offset_by(base, raw, tau: float):
    """``base + bounded_offset(raw, tau)``, still strictly inside the open window
    after floating-point rounding of the sum."""
    base = np.asarray(base, dtype=np.float64)
    half = 0.5 * float(tau)
    out = base + bounded_offset(raw, tau)
    if half > 0:
        out = np.clip(out, np.nextafter(base - half, np.inf), np.nextafter(base + half, -np.inf))
    return out if out.ndim else float(out)


def bounded_slope(raw, tau: float):
    """d bounded_offset / d raw."""
    s = sigmoid(raw)
    return float(tau) * s * (1.0 - s)


@dataclass(frozen=True, eq=False)
class PlacementParams:
    """Raw optimizable scale/locations and their bounds.

    ``base_scale`` is the target object height in world units; locations are
    object centers.
    """
    base_scale: float
    base_locations: np.ndarray
    tau_s: float
    tau_l: float
    scale_raw: float = 0.0
    location_raw: np.ndarray | None = None
    scale_refined: bool = False

    def __post_init__(self):
        base = np.array(self.base_locations, dtype=np.float64).reshape(-1, 3)
        raw = (np.zeros_like(base) if self.location_raw is None
               else np.array(self.location_raw, dtype=np.float64).reshape(base.shape))
        if not self.base_scale > 0:
            raise ConfigError(f"base_scale must be positive, got {self.base_scale}")
        if self.tau_s < 0 or self.tau_l < 0:
            raise ConfigError("thresholds must be non-negative")
        if len(base) < 1:
            raise ConfigError("placement needs at least one location")
        if not (np.all(np.isfinite(base)) and np.all(np.isfinite(raw))
                and np.isfinite(self.scale_raw)):
            raise ConfigError("placement parameters must be finite")
        base.setflags(write=False)
        raw.setflags(write=False)
        object.__setattr__(self, "base_locations", base)
        object.__setattr__(self, "location_raw", raw)
        object.__setattr__(self, "scale_raw", float(self.scale_raw))
        object.__setattr__(self, "base_scale", float(self.base_scale))

    @classmethod
    def initial(cls, base_scale: float, base_locations, tau_s: float | None = None,
                tau_l: float | None = None, object_height: float | None = None):
        """Defaults: ``tau_s = 0.4 * base_scale``, ``tau_l = 0.3 * object_height``."""
        h = base_scale if object_height is None else object_height
        return cls(base_scale, base_locations, 0.4 * base_scale if tau_s is None else tau_s,
                   0.3 * h if tau_l is None else tau_l)

    def __len__(self):
        return len(self.base_locations)

    def effective_scale(self) -> float:
        return offset_by(self.base_scale, self.scale_raw, self.tau_s)

    def effective_location(self, i: int) -> np.ndarray:
        if not 0 <= i < len(self):
            raise IndexError(f"location index {i} out of range 0..{len(self) - 1}")
        return offset_by(self.base_locations[i], self.location_raw[i], self.tau_l)

    def effective_locations(self) -> np.ndarray:
        return offset_by(self.base_locations, self.location_raw, self.tau_l)

    def with_scale_raw(self, value: float) -> "PlacementParams":
        return replace(self, scale_raw=float(value))

    def with_location_raw(self, i: int, value) -> "PlacementParams":
        raw = self.location_raw.copy()
        raw[i] = value
        return replace(self, location_raw=raw)

    def to_dict(self) -> dict:
        return {
            "base_scale": self.base_scale,
            "base_locations": self.base_locations.tolist(),
            "tau_s": self.tau_s,
            "tau_l": self.tau_l,
            "scale_raw": self.scale_raw,
            "location_raw": self.location_raw.tolist(),
            "scale_refined": self.scale_refined,
            "effective_scale": self.effective_scale(),
            "effective_locations": self.effective_locations().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlacementParams":
        return cls(d["base_scale"], d["base_locations"], d["tau_s"], d["tau_l"],
                   d.get("scale_raw", 0.0), d.get("location_raw"), d.get("scale_refined", False))


def base_scale_from_bbox(bbox: BBox2D, depth: float, fy: float) -> float:
    """World height that projects to ``bbox.height_px`` at camera depth ``depth``."""
    return bbox.height_px * depth / fy


# ----------------------------------------------------------------------------
# heading rotations


def _rodrigues(u, c, s) -> np.ndarray:
    x, y, z = u
    t = 1.0 - c
    return np.array([
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ])


def heading_rotation(p_curr, p_next, up_axis: str = "-y", previous=None,
                     eps: float = DIR_EPS) -> np.ndarray:
    """Rotation turning the +z facing direction toward ``p_next`` in the ground plane.

    A step shorter than ``eps`` (after dropping its up component) reuses
    ``previous``, or the identity when there is none.
    """
    up = axis_vector(up_axis)
    d = np.asarray(p_next, dtype=np.float64) - np.asarray(p_curr, dtype=np.float64)
    d = d - (d @ up) * up
    n = np.linalg.norm(d)
    if not n > eps:
        return np.eye(3) if previous is None else np.array(previous, dtype=np.float64)
    h = d / n
    axis = np.cross(FACING, h)
    s = np.linalg.norm(axis)
    c = float(FACING @ h)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        return _rodrigues(up, -1.0, 0.0)
    theta = np.arctan2(s, c)
    return _rodrigues(axis / s, np.cos(theta), np.sin(theta))


@dataclass(frozen=True, eq=False)
class RotationSchedule:
    matrices: np.ndarray
    degenerate_steps: tuple = ()

    def __len__(self):
        return len(self.matrices)

    def __getitem__(self, i):
        return self.matrices[i]


def build_rotation_schedule(locations, up_axis: str = "-y", eps: float = DIR_EPS) -> RotationSchedule:
    """One rotation per location; the last step reuses the previous heading.

    ``locations`` is a (N, 3) array or a :class:`PlacementParams`.
    """
    if isinstance(locations, PlacementParams):
        locations = locations.effective_locations()
    L = np.asarray(locations, dtype=np.float64).reshape(-1, 3)
    if len(L) < 2:
        raise RotationDegenerate("a rotation schedule needs at least 2 locations")
    mats, bad, prev = [], [], None
    for i in range(len(L) - 1):
        R = heading_rotation(L[i], L[i + 1], up_axis, prev, eps)
        d = L[i + 1] - L[i]
        up = axis_vector(up_axis)
        if not np.linalg.norm(d - (d @ up) * up) > eps:
            bad.append(i)
        mats.append(R)
        prev = R
    if len(bad) == len(mats):
        raise RotationDegenerate("every step of the path is degenerate; no heading defined")
    mats.append(mats[-1])
    return RotationSchedule(np.array(mats), tuple(bad))


# ----------------------------------------------------------------------------
# guidance providers


@dataclass(frozen=True, eq=False)
class GuidanceSample:
    """Image-space gradient signal for one rendered frame.

    ``residual`` pairs with the RGB image and ``mask_residual`` (optional) with
    the object's coverage mask. Both play the part of the weighted noise
    residual a diffusion model would supply.
    """
    noise_level: float
    weight: float
    residual: np.ndarray
    mask_residual: np.ndarray | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.residual)):
            raise GradientInvalid("guidance residual is not finite")
        if self.mask_residual is not None and not np.all(np.isfinite(self.mask_residual)):
            raise GradientInvalid("guidance mask residual is not finite")

    def check_shape(self, fb: Framebuffer):
        if self.residual.shape != fb.pixels.shape:
            raise GradientInvalid(f"residual shape {self.residual.shape} does not match the "
                                  f"render {fb.pixels.shape}")
        if self.mask_residual is not None and self.mask_residual.shape != fb.mask.shape:
            raise GradientInvalid("mask residual shape does not match the render")

    def is_zero(self) -> bool:
        return self.weight == 0 or (not np.any(self.residual) and (
            self.mask_residual is None or not np.any(self.mask_residual)))

    def pair(self, fb: Framebuffer) -> float:
        """Weighted inner product of the residual with a rendered frame."""
        total = float(np.sum(self.residual * fb.pixels))
        if self.mask_residual is not None:
            total += float(np.sum(self.mask_residual * fb.mask))
        return self.weight * total


class ScoreProvider(Protocol):
    def __call__(self, image: Framebuffer, prompt: str, noise_level: float,
                 seed: int) -> GuidanceSample: ...


def draw_noise_level(seed: int, iteration: int = 0) -> float:
    return float(np.random.default_rng([seed, iteration]).uniform(0.05, 0.95))


class ZeroProvider:
    def __call__(self, image, prompt, noise_level, seed):
        return GuidanceSample(noise_level, 1.0, np.zeros_like(image.pixels))


@dataclass
class PullToTargetProvider:
    """Gradient of ``gain * sum((render - target)^2)`` over RGB."""
    target: np.ndarray
    gain: float = 1.0

    def __call__(self, image, prompt, noise_level, seed):
        return GuidanceSample(noise_level, 1.0, 2.0 * self.gain * (image.pixels - self.target))


@dataclass
class PullToPixelProvider:
    """Gradient of ``gain * |mask centroid - target|^2`` (pixels), linearized
    about the current mask."""
    target_px: tuple
    gain: float = 1.0

    def __call__(self, image, prompt, noise_level, seed):
        m = image.mask
        total = m.sum()
        zero = np.zeros_like(image.pixels)
        if total <= 0:
            return GuidanceSample(noise_level, 1.0, zero)
        ys, xs = np.mgrid[0:image.height, 0:image.width].astype(np.float64)
        cx, cy = (m * xs).sum() / total, (m * ys).sum() / total
        ex, ey = cx - self.target_px[0], cy - self.target_px[1]
        mres = 2.0 * self.gain * (ex * (xs - cx) + ey * (ys - cy)) / total
        return GuidanceSample(noise_level, 1.0, zero, mres)


@dataclass
class SilhouetteProvider:
    """Gradient of ``gain * sum((mask - target_mask)^2)``."""
    target_mask: np.ndarray
    gain: float = 1.0

    def __call__(self, image, prompt, noise_level, seed):
        return GuidanceSample(noise_level, 1.0, np.zeros_like(image.pixels),
                              2.0 * self.gain * (image.mask - self.target_mask))


@dataclass
class GroundContactProvider:
    """Penalizes object coverage below image row ``horizon``."""
    horizon: float
    gain: float = 1.0

    def __call__(self, image, prompt, noise_level, seed):
        rows = np.arange(image.height, dtype=np.float64)[:, None]
        below = np.broadcast_to(rows > self.horizon, image.mask.shape).astype(np.float64)
        return GuidanceSample(noise_level, 1.0, np.zeros_like(image.pixels), self.gain * below)


class RemoteProvider:
    """Asks a remote scorer over a director transport (task ``score``).

    The reply's fenced payload holds ``residual``: base64 little-endian float32
    of shape (H, W, 3), and optionally ``weight`` and ``mask_residual`` (H, W).
    """

    def __init__(self, transport):
        self.transport = transport

    def __call__(self, image, prompt, noise_level, seed):
        from .director import DirectorRequest, parse_block
        from .imageio import png_bytes

        req = DirectorRequest("score", prompt, png_bytes(image),
                              params={"noise_level": noise_level, "seed": int(seed),
                                      "width": image.width, "height": image.height})
        payload = parse_block(self.transport.send(req))

        def decode(key, shape):
            data = np.frombuffer(base64.b64decode(payload[key]), dtype="<f4")
            if data.size != np.prod(shape):
                raise GradientInvalid(f"remote {key} has {data.size} values, expected {np.prod(shape)}")
            return data.reshape(shape).astype(np.float64)

        try:
            res = decode("residual", image.pixels.shape)
            mres = decode("mask_residual", image.mask.shape) if "mask_residual" in payload else None
            weight = float(payload.get("weight", 1.0))
        except (KeyError, TypeError, ValueError) as e:
            raise GradientInvalid(f"malformed remote score payload: {e}") from None
        return GuidanceSample(noise_level, weight, res, mres)


def encode_residual(arr) -> str:
    return base64.b64encode(np.asarray(arr, dtype="<f4").tobytes()).decode("ascii")


PROVIDERS = ("zero", "pull", "pixel", "silhouette", "ground", "remote")


# ----------------------------------------------------------------------------
# render closure


@dataclass(eq=False)
class RefineScene:
    """Everything needed to render one object placed into fixed surroundings.

    ``asset`` is recentered on its bounding-box center; ``context`` holds the
    clouds (or ``(cloud, transform)`` pairs) that do not move during refinement.
    ``height`` overrides the asset's measured extent along the up axis.
    """
    camera: Camera
    asset: GaussianCloud
    context: list = field(default_factory=list)
    up_axis: str = "-y"
    prompt: str = ""
    background: tuple = (0.0, 0.0, 0.0)
    rotations: np.ndarray | None = None
    height: float | None = None
    _context_splats: Splats | None = field(default=None, repr=False)

    def __post_init__(self):
        self.asset = self.asset.recentered()
        if self.height is not None:
            self.asset_height = float(self.height)
        else:
            extent = self.asset.positions @ axis_vector(self.up_axis)
            self.asset_height = float(extent.max() - extent.min()) if len(self.asset) else 0.0
        if not self.asset_height > 0:
            raise ConfigError("asset has no extent along the up axis")

    def context_splats(self) -> Splats:
        if self._context_splats is None:
            parts = []
            for item in self.context:
                cloud, T = (item, None) if isinstance(item, GaussianCloud) else item
                if T is not None:
                    cloud = apply_transform(cloud, T)
                parts.append(project_cloud(self.camera, cloud))
            self._context_splats = Splats.concatenate(parts)
        return self._context_splats

    def scene_radius(self) -> float:
        clouds = [c if isinstance(c, GaussianCloud) else apply_transform(*c) for c in self.context]
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return 0.5 * self.asset_height
        return GaussianCloud.concatenate(clouds).bounding_sphere()[1]

    def rotation_at(self, i: int) -> np.ndarray:
        if self.rotations is None:
            return np.eye(3)
        return self.rotations[min(i, len(self.rotations) - 1)]

    def object_transform(self, scale: float, location, rotation=None) -> RigidTransform:
        if not scale > 0:
            raise GradientInvalid(f"effective scale {scale} is not positive")
        return RigidTransform(np.asarray(location, dtype=np.float64),
                              np.eye(3) if rotation is None else rotation,
                              scale / self.asset_height)

    def render(self, scale: float, location, rotation=None) -> Framebuffer:
        T = self.object_transform(scale, location, rotation)
        obj = project_cloud(self.camera, apply_transform(self.asset, T), mask_value=1.0)
        splats = Splats.concatenate([self.context_splats(), obj])
        return render_splats(splats, self.camera.width, self.camera.height, self.background)[0]


# ----------------------------------------------------------------------------
# finite-difference guidance gradient


def _selector_point(sel) -> int:
    if sel == "scale":
        return 0
    kind, i, k = sel
    if kind != "location" or k not in (0, 1, 2):
        raise ConfigError(f"bad parameter selector {sel!r}")
    return int(i)


def sds_gradient(params: PlacementParams, selectors, scene: RefineScene, provider,
                 h: float, seed: int = 0, iteration: int = 0, space: str = "raw",
                 sample: GuidanceSample | None = None) -> np.ndarray:
    """Guidance gradient for each selected scalar by central differences.

    Selectors are ``"scale"`` or ``("location", i, axis)``. All selectors must
    refer to the same placement (scale renders at the first location). The
    derivative is taken with respect to the effective (world-space) value and,
    for ``space="raw"``, chained through the bounded parameterization. One
    guidance sample, drawn on the unperturbed render, serves every perturbed
    render.
    """
    if not (h > 0 and np.isfinite(h)):
        raise ConfigError(f"finite-difference step must be positive, got {h}")
    if space not in ("raw", "effective"):
        raise ConfigError(f"unknown gradient space {space!r}")
    selectors = list(selectors)
    points = {_selector_point(s) for s in selectors}
    if len(points) != 1:
        raise ConfigError("selectors in one gradient call must share a placement")
    i = points.pop()
    scale = params.effective_scale()
    loc = params.effective_location(i)
    rot = scene.rotation_at(i)
    if sample is None:
        base = scene.render(scale, loc, rot)
        sample = provider(base, scene.prompt, draw_noise_level(seed, iteration), seed)
        sample.check_shape(base)
    grads = np.zeros(len(selectors))
    if sample.is_zero():
        return grads
    for j, sel in enumerate(selectors):
        vals = []
        for sign in (1.0, -1.0):
            s, L = scale, loc.copy()
            if sel == "scale":
                s = scale + sign * h
            else:
                L[sel[2]] += sign * h
            try:
                fb = scene.render(s, L, rot)
            except RenderError as e:
                raise GradientInvalid(f"perturbed render failed for {sel!r}: {e}") from None
            vals.append(sample.pair(fb))
        g = (vals[0] - vals[1]) / (2.0 * h)
        if not np.isfinite(g):
            raise GradientInvalid(f"non-finite gradient for {sel!r}")
        if space == "raw":
            if sel == "scale":
                g *= bounded_slope(params.scale_raw, params.tau_s)
            else:
                g *= bounded_slope(params.location_raw[i, sel[2]], params.tau_l)
        grads[j] = g
    return grads


# ----------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class RefineConfig:
    step: float = 0.05
    max_iters: int = 200
    tol: float = 1e-5
    patience: int = 10
    fd_step: float | None = None
    joint: bool = False
    seed: int = 0
    divergence_limit: float = DIVERGENCE_LIMIT

    def __post_init__(self):
        if not self.step > 0 or self.max_iters < 0 or self.patience < 1:
            raise ConfigError("invalid refinement configuration")
        if self.fd_step is not None and not self.fd_step > 0:
            raise ConfigError("fd_step must be positive")


@dataclass
class RefineResult:
    params: PlacementParams
    trace: list


def _fd_step(config: RefineConfig, scene: RefineScene) -> float:
    return config.fd_step if config.fd_step is not None else 1e-3 * scene.scene_radius()


class _Tracker:
    """Counts consecutive small updates for early stopping."""

    def __init__(self, config):
        self.config = config
        self.quiet = 0

    def update(self, delta) -> bool:
        if np.max(np.abs(delta)) < self.config.tol:
            self.quiet += 1
        else:
            self.quiet = 0
        return self.quiet >= self.config.patience


def _check_divergence(raw, what, limit):
    if np.any(np.abs(raw) > limit):
        raise RefinementDiverged(f"{what} raw parameter left [-{limit}, {limit}]")


def refine_scale(params: PlacementParams, scene: RefineScene, provider,
                 config: RefineConfig = RefineConfig()) -> RefineResult:
    """Gradient descent on the raw scale with the object at the first location."""
    h = _fd_step(config, scene)
    trace = []
    tracker = _Tracker(config)
    for it in range(config.max_iters):
        g = sds_gradient(params, ["scale"], scene, provider, h, config.seed, it)[0]
        new_raw = params.scale_raw - config.step * g
        _check_divergence(new_raw, "scale", config.divergence_limit)
        delta = new_raw - params.scale_raw
        params = params.with_scale_raw(new_raw)
        trace.append({"stage": "scale", "iter": it, "grad": float(g), "raw": float(new_raw),
                      "effective": params.effective_scale()})
        if tracker.update(delta):
            break
    return RefineResult(replace(params, scale_refined=True), trace)


def _location_step(params, i, scene, provider, config, h, it):
    sels = [("location", i, k) for k in range(3)]
    g = sds_gradient(params, sels, scene, provider, h, config.seed + 7919 * (i + 1), it)
    new_raw = params.location_raw[i] - config.step * g
    _check_divergence(new_raw, f"location {i}", config.divergence_limit)
    delta = new_raw - params.location_raw[i]
    params = params.with_location_raw(i, new_raw)
    rec = {"stage": "location", "point": i, "iter": it, "grad": g.tolist(),
           "raw": new_raw.tolist(), "effective": params.effective_location(i).tolist()}
    return params, delta, rec


def refine_locations(params: PlacementParams, scene: RefineScene, provider,
                     config: RefineConfig = RefineConfig()) -> RefineResult:
    """Refine every location offset; requires a finished scale refinement.

    By default points are handled one at a time in path order, each running
    its own descent to convergence. ``config.joint`` instead advances all
    points together every iteration.
    """
    if not params.scale_refined:
        raise ConfigError("refine_locations requires refine_scale to run first")
    h = _fd_step(config, scene)
    trace = []
    n = len(params)
    if config.joint:
        trackers = [_Tracker(config) for _ in range(n)]
        done = [False] * n
        for it in range(config.max_iters):
            for i in range(n):
                if done[i]:
                    continue
                params, delta, rec = _location_step(params, i, scene, provider, config, h, it)
                trace.append(rec)
                done[i] = trackers[i].update(delta)
            if all(done):
                break
    else:
        for i in range(n):
            tracker = _Tracker(config)
            for it in range(config.max_iters):
                params, delta, rec = _location_step(params, i, scene, provider, config, h, it)
                trace.append(rec)
                if tracker.update(delta):
                    break
    return RefineResult(params, trace)


# ----------------------------------------------------------------------------
# placement file


def placement_to_dict(params: PlacementParams, schedule: RotationSchedule | None,
                      trace=(), up_axis: str = "-y") -> dict:
    return {
        "params": params.to_dict(),
        "up_axis": up_axis,
        "rotations": None if schedule is None else schedule.matrices.tolist(),
        "degenerate_steps": [] if schedule is None else list(schedule.degenerate_steps),
        "trace": list(trace),
    }


def save_placement(path, params, schedule, trace=(), up_axis="-y") -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(placement_to_dict(params, schedule, trace, up_axis),
                                     indent=1, sort_keys=True))


def load_placement(path):
    """Returns ``(PlacementParams, RotationSchedule or None, up_axis)``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"placement file not found: {path}")
    try:
        d = json.loads(path.read_text())
        params = PlacementParams.from_dict(d["params"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{path}: malformed placement file: {e}") from None
    rots = d.get("rotations")
    schedule = None if rots is None else RotationSchedule(
        np.array(rots, dtype=np.float64), tuple(d.get("degenerate_steps", ())))
    return params, schedule, d.get("up_axis", "-y")
