"""Lift 2D pixel trajectories into world space and resample them per frame."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import BBox2D, Camera, axis_vector, unproject
from .errors import ConfigError, DepthMissing, TrajectoryDegenerate
from .rasterizer import DepthMap

SEARCH_RADIUS = 2  # 5x5 neighborhood
ARC_TABLE_SIZE = 256
MODES = ("constant_speed", "uniform_parameter")


@dataclass(frozen=True)
class Trajectory2D:
    """Pixel path points plus the object's 2D box.

    Each point is the lower-left corner of the box; the box bottom center is
    what gets lifted.
    """
    points: tuple
    bbox: BBox2D

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.points)
        if len(pts) < 2:
            raise TrajectoryDegenerate("a trajectory needs at least 2 points")
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class Trajectory3D:
    points: np.ndarray
    up_axis: str = "-y"
    height: float = 0.0
    anchors: tuple = ()
    depth_sources: tuple = ()

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise TrajectoryDegenerate("non-finite lifted point")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def to_dict(self) -> dict:
        return {
            "points": self.points.tolist(),
            "up_axis": self.up_axis,
            "height": self.height,
            "anchors": [list(a) for a in self.anchors],
            "depth_sources": list(self.depth_sources),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory3D":
        return cls(np.array(d["points"], dtype=np.float64), d.get("up_axis", "-y"),
                   float(d.get("height", 0.0)), tuple(tuple(a) for a in d.get("anchors", ())),
                   tuple(d.get("depth_sources", ())))


def anchor_pixel(p_px, bbox: BBox2D | None, literal_offset: bool = False) -> np.ndarray:
    """Bottom center of the box whose lower-left corner is ``p_px``.

    ``literal_offset`` shifts by half the box height instead of half the width.
    """
    p = np.asarray(p_px, dtype=np.float64)
    if bbox is None:
        return p.copy()
    dx = bbox.height_px / 2 if literal_offset else bbox.width_px / 2
    return np.array([p[0] + dx, p[1]])


def _lookup_depth(D: DepthMap, anchor) -> tuple[float, str]:
    x = int(np.clip(np.floor(anchor[0] + 0.5), 0, D.width - 1))
    y = int(np.clip(np.floor(anchor[1] + 0.5), 0, D.height - 1))
    d = D.sample(x, y)
    if d is not None:
        return d, "exact"
    best = None
    for dy in range(-SEARCH_RADIUS, SEARCH_RADIUS + 1):
        for dx in range(-SEARCH_RADIUS, SEARCH_RADIUS + 1):
            d = D.sample(x + dx, y + dy)
            if d is None:
                continue
            # nearest valid sample, ties broken in scan order
            key = (dx * dx + dy * dy, dy, dx)
            if best is None or key < best[0]:
                best = (key, d)
    if best is None:
        raise DepthMissing(f"no valid depth within a {2 * SEARCH_RADIUS + 1}x{2 * SEARCH_RADIUS + 1} "
                           f"window around pixel ({x}, {y})")
    return best[1], "neighborhood"


def lift_point(cam: Camera, p_px, D: DepthMap, bbox: BBox2D | None = None, H_3D: float = 0.0,
               up_axis: str = "-y", literal_offset: bool = False, depth_source: str | None = None,
               _info: list | None = None) -> np.ndarray:
    """World position of the object's center for a box anchored at ``p_px``.

    The anchor is unprojected at the depth found in ``D``; the result is then
    raised by ``H_3D / 2`` along ``up_axis`` so the object's base sits on the
    surface.
    """
    anchor = anchor_pixel(p_px, bbox, literal_offset)
    depth, source = _lookup_depth(D, anchor)
    ground = unproject(cam, anchor, depth)
    if _info is not None:
        _info.append((tuple(anchor), depth_source or source))
    return ground + 0.5 * H_3D * axis_vector(up_axis)


def lift_trajectory(cam: Camera, traj2d: Trajectory2D, D: DepthMap, H_3D: float,
                    up_axis: str = "-y", literal_offset: bool = False,
                    external_depth: bool = False) -> Trajectory3D:
    info = []
    pts = []
    for i, p in enumerate(traj2d.points):
        try:
            pts.append(lift_point(cam, p, D, traj2d.bbox, H_3D, up_axis, literal_offset,
                                  "external" if external_depth else None, info))
        except DepthMissing as e:
            raise DepthMissing(f"trajectory point {i}: {e}", index=i) from None
    return Trajectory3D(np.array(pts), up_axis, float(H_3D),
                        tuple(a for a, _ in info), tuple(s for _, s in info))


def _catmull_rom(P: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Uniform Catmull-Rom through ``P`` at global parameters ``s`` in [0, n-1]."""
    n = len(P)
    ext = np.concatenate([P[:1], P, P[-1:]])
    seg = np.clip(np.floor(s).astype(int), 0, n - 2)
    t = (s - seg)[:, None]
    p0, p1, p2, p3 = ext[seg], ext[seg + 1], ext[seg + 2], ext[seg + 3]
    return 0.5 * (2 * p1 + (p2 - p0) * t + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t ** 2
                  + (3 * p1 - p0 - 3 * p2 + p3) * t ** 3)


@dataclass(frozen=True)
class TimedPath:
    """Spline through control points with an arc-length lookup table."""
    control: np.ndarray
    table_s: np.ndarray = field(repr=False)
    table_len: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, points) -> "TimedPath":
        P = np.asarray(points, dtype=np.float64)
        if len(P) < 2:
            raise TrajectoryDegenerate("a path needs at least 2 points")
        s = np.linspace(0.0, len(P) - 1, ARC_TABLE_SIZE)
        xyz = _catmull_rom(P, s)
        cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(xyz, axis=0), axis=1))])
        return cls(P, s, cum)

    @property
    def length(self) -> float:
        return float(self.table_len[-1])

    def _finish(self, u, out):
        out[u <= 0.0] = self.control[0]
        out[u >= 1.0] = self.control[-1]
        return out

    def position(self, u, constant_speed: bool = True) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        uc = np.clip(u, 0.0, 1.0)
        if constant_speed and self.length > 0:
            s = np.interp(uc * self.length, self.table_len, self.table_s)
        else:
            s = uc * (len(self.control) - 1)
        return self._finish(u, _catmull_rom(self.control, s))


def resample_path(traj3d: Trajectory3D | np.ndarray, frame_count: int,
                  mode: str = "constant_speed") -> np.ndarray:
    """Per-frame positions, shape (frame_count, 3), endpoints exact."""
    if mode not in MODES:
        raise ConfigError(f"unknown resample mode {mode!r}; expected one of {MODES}")
    if int(frame_count) != frame_count or frame_count < 2:
        raise ConfigError(f"frame_count must be an integer >= 2, got {frame_count}")
    pts = traj3d.points if isinstance(traj3d, Trajectory3D) else np.asarray(traj3d, float)
    path = TimedPath.build(pts)
    u = np.linspace(0.0, 1.0, int(frame_count))
    return path.position(u, constant_speed=(mode == "constant_speed"))
