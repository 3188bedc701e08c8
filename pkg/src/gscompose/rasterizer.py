"""Tile-based software splatting.

Gaussians are projected to screen-space ellipses (EWA: J W Sigma W^T J^T plus a
0.3 px^2 low-pass floor), sorted once per frame by camera depth and alpha
composited front to back inside 16x16 pixel tiles.

The per-splat weight is ``min(clamp, alpha * exp(-m2 / 2))`` where ``m2`` is the
squared Mahalanobis distance of the pixel center; splats are truncated at the
3-sigma ellipse (``m2 > 9`` contributes nothing). Both the tiled renderer and
the brute-force reference use the same truncation, so they only differ by the
early termination cutoff.
"""
from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Iterable, Sequence

import numba
import numpy as np

from .core import Camera, Gaussian3D, GaussianCloud, apply_transform
from .errors import ConfigError, RenderError

TILE = 16
LOW_PASS = 0.3
ALPHA_CLAMP = 0.99
T_MIN = 1e-4
NEAR = 0.01
SIGMA_CUT = 3.0
DEPTH_VALID_ALPHA = 0.5

# Prefer OpenMP: an outdated system TBB is otherwise probed first and warned about.
if numba.config.THREADING_LAYER_PRIORITY[0] == "tbb":
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]


@dataclass(frozen=True, eq=False)
class Splat2D:
    mean_px: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    base_opacity: float


@dataclass(eq=False)
class Splats:
    """Projected splats in structure-of-arrays form, in input order."""

    means: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2)
    depths: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    masks: np.ndarray  # (N,) weight of each splat in the mask channel

    def __len__(self):
        return len(self.depths)

    @classmethod
    def from_splat2d(cls, splats: Sequence[Splat2D], masks=None) -> "Splats":
        n = len(splats)
        if n == 0:
            return cls.empty()
        return cls(
            np.array([s.mean_px for s in splats], dtype=np.float64).reshape(n, 2),
            np.array([s.cov2d for s in splats], dtype=np.float64).reshape(n, 2, 2),
            np.array([s.depth for s in splats], dtype=np.float64),
            np.array([s.color for s in splats], dtype=np.float64).reshape(n, 3),
            np.array([s.base_opacity for s in splats], dtype=np.float64),
            np.zeros(n) if masks is None else np.asarray(masks, dtype=np.float64),
        )

    @classmethod
    def empty(cls) -> "Splats":
        return cls(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros((0, 3)),
                   np.zeros(0), np.zeros(0))

    @classmethod
    def concatenate(cls, parts: Iterable["Splats"]) -> "Splats":
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("means", "cov2d", "depths", "colors", "opacities", "masks")))

    def conics(self) -> np.ndarray:
        a, b, c = self.cov2d[:, 0, 0], self.cov2d[:, 0, 1], self.cov2d[:, 1, 1]
        det = a * c - b * b
        return np.stack([c / det, -b / det, a / det], axis=1)


@dataclass(eq=False)
class Framebuffer:
    width: int
    height: int
    pixels: np.ndarray  # (H, W, 3) linear RGB
    alpha: np.ndarray | None = None  # (H, W) accumulated opacity
    mask: np.ndarray | None = None  # (H, W) accumulated weight of masked splats

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3):
            raise ConfigError("framebuffer shape mismatch")


@dataclass(eq=False)
class DepthMap:
    width: int
    height: int
    values: np.ndarray  # (H, W) camera-space depth, 0 where invalid
    valid: np.ndarray  # (H, W) bool

    def sample(self, x: int, y: int):
        """Depth at integer pixel (x, y), or None when invalid / outside."""
        if 0 <= x < self.width and 0 <= y < self.height and self.valid[y, x]:
            return float(self.values[y, x])
        return None


def _jacobian_clamp(cam: Camera):
    # x/z and y/z limits for the projection Jacobian, 30% beyond the frustum
    lim_x = 1.3 * max(cam.cx, cam.width - cam.cx) / cam.fx
    lim_y = 1.3 * max(cam.cy, cam.height - cam.cy) / cam.fy
    return lim_x, lim_y


@numba.njit(cache=True)
def _project_kernel(pos, log_scales, quats, W, tw, fx, fy, cx, cy, lim_x, lim_y, near,
                    width, height, low_pass, sigma_cut):
    n = len(pos)
    means = np.empty((n, 2))
    cov2 = np.empty((n, 2, 2))
    depths = np.empty(n)
    keep = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        x = W[0, 0] * pos[i, 0] + W[0, 1] * pos[i, 1] + W[0, 2] * pos[i, 2] + tw[0]
        y = W[1, 0] * pos[i, 0] + W[1, 1] * pos[i, 1] + W[1, 2] * pos[i, 2] + tw[1]
        z = W[2, 0] * pos[i, 0] + W[2, 1] * pos[i, 1] + W[2, 2] * pos[i, 2] + tw[2]
        if not z > near:
            continue
        qw, qx, qy, qz = quats[i, 0], quats[i, 1], quats[i, 2], quats[i, 3]
        qn = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        qw /= qn
        qx /= qn
        qy /= qn
        qz /= qn
        rot = np.empty((3, 3))
        rot[0, 0] = 1 - 2 * (qy * qy + qz * qz)
        rot[0, 1] = 2 * (qx * qy - qw * qz)
        rot[0, 2] = 2 * (qx * qz + qw * qy)
        rot[1, 0] = 2 * (qx * qy + qw * qz)
        rot[1, 1] = 1 - 2 * (qx * qx + qz * qz)
        rot[1, 2] = 2 * (qy * qz - qw * qx)
        rot[2, 0] = 2 * (qx * qz - qw * qy)
        rot[2, 1] = 2 * (qy * qz + qw * qx)
        rot[2, 2] = 1 - 2 * (qx * qx + qy * qy)
        tx = min(max(x / z, -lim_x), lim_x) * z
        ty = min(max(y / z, -lim_y), lim_y) * z
        j00 = fx / z
        j02 = -fx * tx / (z * z)
        j11 = fy / z
        j12 = -fy * ty / (z * z)
        # B = J W R diag(s); cov2 = B B^T
        b = np.empty((2, 3))
        for c in range(3):
            s = math.exp(log_scales[i, c])
            wr0 = W[0, 0] * rot[0, c] + W[0, 1] * rot[1, c] + W[0, 2] * rot[2, c]
            wr1 = W[1, 0] * rot[0, c] + W[1, 1] * rot[1, c] + W[1, 2] * rot[2, c]
            wr2 = W[2, 0] * rot[0, c] + W[2, 1] * rot[1, c] + W[2, 2] * rot[2, c]
            b[0, c] = (j00 * wr0 + j02 * wr2) * s
            b[1, c] = (j11 * wr1 + j12 * wr2) * s
        a00 = b[0, 0] * b[0, 0] + b[0, 1] * b[0, 1] + b[0, 2] * b[0, 2] + low_pass
        a01 = b[0, 0] * b[1, 0] + b[0, 1] * b[1, 1] + b[0, 2] * b[1, 2]
        a11 = b[1, 0] * b[1, 0] + b[1, 1] * b[1, 1] + b[1, 2] * b[1, 2] + low_pass
        mx = fx * x / z + cx
        my = fy * y / z + cy
        rx = sigma_cut * math.sqrt(a00)
        ry = sigma_cut * math.sqrt(a11)
        if mx + rx < 0 or mx - rx > width - 1 or my + ry < 0 or my - ry > height - 1:
            continue
        keep[i] = True
        means[i, 0] = mx
        means[i, 1] = my
        cov2[i, 0, 0] = a00
        cov2[i, 0, 1] = a01
        cov2[i, 1, 0] = a01
        cov2[i, 1, 1] = a11
        depths[i] = z
    return means, cov2, depths, keep


def project_cloud(cam: Camera, cloud: GaussianCloud, mask_value: float = 0.0,
                  near: float = NEAR) -> Splats:
    """Project every Gaussian of ``cloud``; culled Gaussians are dropped.

    Culled means the center is not beyond the near plane or the 3-sigma
    bounding rectangle misses the image.
    """
    if len(cloud) == 0:
        return Splats.empty()
    lim_x, lim_y = _jacobian_clamp(cam)
    means, cov2, depths, keep = _project_kernel(
        cloud.positions, cloud.log_scales, cloud.rotations,
        np.ascontiguousarray(cam.world_to_cam_rotation), np.ascontiguousarray(cam.world_to_cam_translation),
        cam.fx, cam.fy, cam.cx, cam.cy, lim_x, lim_y, near,
        cam.width, cam.height, LOW_PASS, SIGMA_CUT)
    return Splats(
        means=means[keep],
        cov2d=cov2[keep],
        depths=depths[keep],
        colors=cloud.colors[keep],
        opacities=cloud.opacities[keep],
        masks=np.full(int(keep.sum()), float(mask_value)),
    )


def project_gaussian(cam: Camera, g: Gaussian3D):
    """Project a single Gaussian; returns a :class:`Splat2D` or ``None`` if culled."""
    s = project_cloud(cam, GaussianCloud.from_gaussians([g]))
    if len(s) == 0:
        return None
    return Splat2D(s.means[0], s.cov2d[0], float(s.depths[0]), s.colors[0], float(s.opacities[0]))


# ----------------------------------------------------------------------------
# numba kernels


@numba.njit(inline="always")
def _splat_weight(px, py, mx, my, ca, cb, cc, opacity, clamp):
    dx = px - mx
    dy = py - my
    m2 = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    if m2 > 9.0:
        return 0.0
    a = opacity * math.exp(-0.5 * m2)
    if a > clamp:
        return clamp
    return a


@numba.njit(cache=True)
def _bin_tiles(order, rects, tiles_x, tiles_y):
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for j in order:
        for ty in range(rects[j, 2] // 16, rects[j, 3] // 16 + 1):
            for tx in range(rects[j, 0] // 16, rects[j, 1] // 16 + 1):
                counts[ty * tiles_x + tx + 1] += 1
    for t in range(n_tiles):
        counts[t + 1] += counts[t]
    ids = np.empty(counts[n_tiles], dtype=np.int64)
    fill = counts[:n_tiles].copy()
    for j in order:
        for ty in range(rects[j, 2] // 16, rects[j, 3] // 16 + 1):
            for tx in range(rects[j, 0] // 16, rects[j, 1] // 16 + 1):
                t = ty * tiles_x + tx
                ids[fill[t]] = j
                fill[t] += 1
    return counts, ids


@numba.njit(parallel=True, cache=True)
def _render_tiles(offsets, ids, rects, means, conics, opacities, colors, depths, masks,
                  width, height, tiles_x, bg, clamp, t_min, out):
    n_tiles = len(offsets) - 1
    for t in numba.prange(n_tiles):
        x0 = (t % tiles_x) * 16
        y0 = (t // tiles_x) * 16
        x1 = min(x0 + 16, width)
        y1 = min(y0 + 16, height)
        # splat-major traversal: each splat in depth order visits only the pixels
        # of its rect inside this tile; per pixel the operation order is the same
        # as a pixel-major loop, so results are identical
        acc = np.zeros((16, 16, 7))
        acc[:, :, 0] = 1.0
        live = (x1 - x0) * (y1 - y0)
        for k in range(offsets[t], offsets[t + 1]):
            j = ids[k]
            mx = means[j, 0]
            my = means[j, 1]
            ca = conics[j, 0]
            cb = conics[j, 1]
            cc = conics[j, 2]
            op = opacities[j]
            r, g, b = colors[j, 0], colors[j, 1], colors[j, 2]
            z = depths[j]
            mk = masks[j]
            for py in range(max(y0, rects[j, 2]), min(y1, rects[j, 3] + 1)):
                # columns where the 3-sigma ellipse crosses this row, padded by a
                # pixel so rounding never drops one; the weight test stays exact
                dy = py - my
                disc = cb * cb * dy * dy - ca * (cc * dy * dy - 9.0)
                if disc < 0.0:
                    continue
                root = math.sqrt(disc)
                lo = int(math.floor(mx + (-cb * dy - root) / ca)) - 1
                hi = int(math.ceil(mx + (-cb * dy + root) / ca)) + 1
                for px in range(max(x0, rects[j, 0], lo), min(x1, rects[j, 1] + 1, hi + 1)):
                    ly = py - y0
                    lx = px - x0
                    T = acc[ly, lx, 0]
                    if T < t_min:
                        continue
                    a = _splat_weight(float(px), float(py), mx, my, ca, cb, cc, op, clamp)
                    if a <= 0.0:
                        continue
                    w = a * T
                    acc[ly, lx, 1] += r * w
                    acc[ly, lx, 2] += g * w
                    acc[ly, lx, 3] += b * w
                    acc[ly, lx, 4] += w
                    acc[ly, lx, 5] += z * w
                    acc[ly, lx, 6] += mk * w
                    T = T * (1.0 - a)
                    acc[ly, lx, 0] = T
                    if T < t_min:
                        live -= 1
            if live == 0:
                break
        for py in range(y0, y1):
            for px in range(x0, x1):
                T = acc[py - y0, px - x0, 0]
                out[py, px, 0] = acc[py - y0, px - x0, 1] + T * bg[0]
                out[py, px, 1] = acc[py - y0, px - x0, 2] + T * bg[1]
                out[py, px, 2] = acc[py - y0, px - x0, 3] + T * bg[2]
                out[py, px, 3] = acc[py - y0, px - x0, 4]
                out[py, px, 4] = acc[py - y0, px - x0, 5]
                out[py, px, 5] = acc[py - y0, px - x0, 6]


@numba.njit(parallel=True, cache=True)
def _render_reference(means, conics, opacities, colors, depths, masks,
                      width, height, bg, clamp, out):
    n = len(depths)
    for py in numba.prange(height):
        cover = np.empty(n, dtype=np.int64)
        for px in range(width):
            # gather covering splats in input order, then sort by depth;
            # the stable sort breaks ties on input index
            m = 0
            for j in range(n):
                a = _splat_weight(float(px), float(py), means[j, 0], means[j, 1],
                                  conics[j, 0], conics[j, 1], conics[j, 2], opacities[j], clamp)
                if a > 0.0:
                    cover[m] = j
                    m += 1
            sel = cover[:m]
            order = np.argsort(depths[sel], kind="mergesort")
            T = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            wsum = 0.0
            dsum = 0.0
            msum = 0.0
            for q in range(m):
                j = sel[order[q]]
                a = _splat_weight(float(px), float(py), means[j, 0], means[j, 1],
                                  conics[j, 0], conics[j, 1], conics[j, 2], opacities[j], clamp)
                w = a * T
                r += colors[j, 0] * w
                g += colors[j, 1] * w
                b += colors[j, 2] * w
                wsum += w
                dsum += depths[j] * w
                msum += masks[j] * w
                T = T * (1.0 - a)
            out[py, px, 0] = r + T * bg[0]
            out[py, px, 1] = g + T * bg[1]
            out[py, px, 2] = b + T * bg[2]
            out[py, px, 3] = wsum
            out[py, px, 4] = dsum
            out[py, px, 5] = msum


# ----------------------------------------------------------------------------


def _pixel_rects(splats: Splats, width: int, height: int) -> np.ndarray:
    pad = 1e-6
    rx = SIGMA_CUT * np.sqrt(splats.cov2d[:, 0, 0]) + pad
    ry = SIGMA_CUT * np.sqrt(splats.cov2d[:, 1, 1]) + pad
    mx, my = splats.means[:, 0], splats.means[:, 1]
    rects = np.stack([
        np.clip(np.ceil(mx - rx), 0, width - 1),
        np.clip(np.floor(mx + rx), 0, width - 1),
        np.clip(np.ceil(my - ry), 0, height - 1),
        np.clip(np.floor(my + ry), 0, height - 1),
    ], axis=1).astype(np.int64)
    return rects


def _check_size(width, height):
    if int(width) <= 0 or int(height) <= 0:
        raise ConfigError(f"zero-area framebuffer {width}x{height}")


def _validate_splats(splats: Splats):
    if len(splats) == 0:
        return
    arrays = (splats.means, splats.cov2d, splats.depths, splats.colors, splats.opacities)
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise RenderError("non-finite splat data")
    a, b, c = splats.cov2d[:, 0, 0], splats.cov2d[:, 0, 1], splats.cov2d[:, 1, 1]
    if np.any(a <= 0) or np.any(a * c - b * b <= 0):
        raise RenderError("2D covariance is not positive definite")
    if np.any(splats.depths <= 0):
        raise RenderError("splat depth must be positive")


def composite(splats: Splats, width: int, height: int, background=(0.0, 0.0, 0.0),
              alpha_clamp: float = ALPHA_CLAMP, t_min: float = T_MIN) -> np.ndarray:
    """Tiled front-to-back compositing.

    Returns an (H, W, 6) buffer: RGB, accumulated alpha, alpha-weighted depth sum,
    alpha-weighted mask sum. Pass ``t_min=0`` to disable early termination.
    """
    _check_size(width, height)
    _validate_splats(splats)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    out = np.zeros((height, width, 6))
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    if len(splats) == 0:
        out[..., :3] = bg
        return out
    rects = _pixel_rects(splats, width, height)
    order = np.argsort(splats.depths, kind="stable")
    offsets, ids = _bin_tiles(order, rects, tiles_x, tiles_y)
    _render_tiles(offsets, ids, rects, splats.means, splats.conics(), splats.opacities,
                  splats.colors, splats.depths, splats.masks, width, height, tiles_x,
                  bg, float(alpha_clamp), float(t_min), out)
    return out


def composite_reference(splats: Splats, width: int, height: int, background=(0.0, 0.0, 0.0),
                        alpha_clamp: float = ALPHA_CLAMP) -> np.ndarray:
    """Brute-force oracle: every splat tested at every pixel, per-pixel depth sort,
    no tiling and no early termination."""
    _check_size(width, height)
    _validate_splats(splats)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    out = np.zeros((height, width, 6))
    if len(splats) == 0:
        out[..., :3] = bg
        return out
    _render_reference(splats.means, splats.conics(), splats.opacities, splats.colors,
                      splats.depths, splats.masks, width, height, bg, float(alpha_clamp), out)
    return out


RenderInput = GaussianCloud | tuple


def _gather(cam: Camera, clouds, mask_flags=None) -> Splats:
    parts = []
    for i, item in enumerate(clouds):
        if isinstance(item, GaussianCloud):
            cloud, T = item, None
        else:
            cloud, T = item
        if T is not None:
            cloud = apply_transform(cloud, T)
        flag = 1.0 if (mask_flags is not None and mask_flags[i]) else 0.0
        parts.append(project_cloud(cam, cloud, mask_value=flag))
    return Splats.concatenate(parts)


def _to_framebuffer(buf: np.ndarray) -> Framebuffer:
    h, w = buf.shape[:2]
    if not np.all(np.isfinite(buf)):
        raise RenderError("non-finite render output")
    return Framebuffer(w, h, np.clip(buf[..., :3], 0.0, 1.0),
                       np.clip(buf[..., 3], 0.0, 1.0), np.clip(buf[..., 5], 0.0, 1.0))


def _to_depth(buf: np.ndarray) -> DepthMap:
    h, w = buf.shape[:2]
    acc = buf[..., 3]
    valid = acc >= DEPTH_VALID_ALPHA
    values = np.zeros((h, w))
    values[valid] = buf[..., 4][valid] / acc[valid]
    valid &= values > 0
    return DepthMap(w, h, values, valid)


def render(cam: Camera, clouds: Sequence[RenderInput], background=(0.0, 0.0, 0.0),
           mask_flags: Sequence[bool] | None = None, alpha_clamp: float = ALPHA_CLAMP):
    """Render color and depth in one pass. Returns ``(Framebuffer, DepthMap)``.

    ``clouds`` holds GaussianClouds or ``(cloud, RigidTransform)`` pairs.
    ``mask_flags`` marks clouds whose visible coverage accumulates in
    ``Framebuffer.mask``.
    """
    return render_splats(_gather(cam, clouds, mask_flags), cam.width, cam.height, background,
                         alpha_clamp)


def render_splats(splats: Splats, width: int, height: int, background=(0.0, 0.0, 0.0),
                  alpha_clamp: float = ALPHA_CLAMP):
    """Composite already projected splats; same outputs as :func:`render`."""
    buf = composite(splats, width, height, background, alpha_clamp)
    return _to_framebuffer(buf), _to_depth(buf)


def rasterize(cam: Camera, clouds: Sequence[RenderInput], background=(0.0, 0.0, 0.0),
              mask_flags: Sequence[bool] | None = None,
              alpha_clamp: float = ALPHA_CLAMP) -> Framebuffer:
    return render(cam, clouds, background, mask_flags, alpha_clamp)[0]


def render_depth(cam: Camera, clouds: Sequence[RenderInput]) -> DepthMap:
    return render(cam, clouds)[1]


def rasterize_reference(cam: Camera, clouds: Sequence[RenderInput], background=(0.0, 0.0, 0.0),
                        mask_flags: Sequence[bool] | None = None,
                        alpha_clamp: float = ALPHA_CLAMP) -> Framebuffer:
    splats = _gather(cam, clouds, mask_flags)
    return _to_framebuffer(composite_reference(splats, cam.width, cam.height, background,
                                               alpha_clamp))
