"""Scene manifests, camera paths and content hashing.

All documents are JSON. Relative paths inside a manifest resolve against the
manifest's own directory.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .core import Camera
from .errors import ConfigError

SCHEMA_VERSION = 1
DEFAULT_FRAMES = 24
DEFAULT_RESOLUTION = (512, 512)
CAMERA_MODES = ("hold", "linear")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    path = Path(path)
    if path.is_dir():
        h = hashlib.sha256()
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(p.relative_to(path).as_posix().encode())
                h.update(sha256_file(p).encode())
        return h.hexdigest()
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    return sha256_bytes(path.read_bytes())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def hash_inputs(obj) -> str:
    return sha256_bytes(canonical_json(obj).encode())


def write_json(path, obj) -> None:
    """Deterministic pretty JSON (sorted keys, trailing newline)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path, what="file"):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text())
    except ValueError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None


# ----------------------------------------------------------------------------
# camera paths


@dataclass(frozen=True, eq=False)
class CameraPath:
    """Keyframed camera. Positions interpolate linearly and orientations by
    slerp; intrinsics must match across keys."""
    times: tuple
    cameras: tuple
    mode: str = "hold"

    def __post_init__(self):
        if self.mode not in CAMERA_MODES:
            raise ConfigError(f"unknown camera interpolation {self.mode!r}")
        if not self.cameras or len(self.times) != len(self.cameras):
            raise ConfigError("camera path needs one time per keyframe and at least one key")
        t = np.asarray(self.times, dtype=np.float64)
        if np.any(t < 0) or np.any(t > 1) or np.any(np.diff(t) <= 0):
            raise ConfigError("camera key times must be strictly increasing in [0, 1]")
        c0 = self.cameras[0]
        for c in self.cameras[1:]:
            if (c.fx, c.fy, c.cx, c.cy, c.width, c.height) != (c0.fx, c0.fy, c0.cx, c0.cy,
                                                               c0.width, c0.height):
                raise ConfigError("camera keyframes with differing intrinsics are not supported")

    @classmethod
    def static(cls, camera: Camera) -> "CameraPath":
        return cls((0.0,), (camera,), "hold")

    def at(self, u: float) -> Camera:
        if self.mode == "hold" or len(self.cameras) == 1:
            idx = int(np.searchsorted(self.times, u, side="right")) - 1
            return self.cameras[max(idx, 0)]
        t = np.asarray(self.times)
        u = float(np.clip(u, t[0], t[-1]))
        rots = Rotation.from_matrix(np.stack([c.world_to_cam_rotation for c in self.cameras]))
        R = Slerp(t, rots)([u]).as_matrix()[0]
        centers = np.stack([c.center for c in self.cameras])
        center = np.array([np.interp(u, t, centers[:, k]) for k in range(3)])
        # re-orthonormalize to absorb slerp round-off
        U, _, Vt = np.linalg.svd(R)
        R = U @ Vt
        return self.cameras[0].with_pose(R, -R @ center)

    def frame_time(self, f: int, frame_count: int) -> float:
        return 0.0 if frame_count <= 1 else f / (frame_count - 1)

    def with_resolution(self, width: int, height: int) -> "CameraPath":
        return CameraPath(self.times, tuple(c.with_resolution(width, height) for c in self.cameras),
                          self.mode)

    def to_dict(self) -> dict:
        return {"mode": self.mode,
                "keyframes": [{"time": t, "camera": c.to_dict()}
                              for t, c in zip(self.times, self.cameras)]}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPath":
        try:
            keys = d["keyframes"]
            return cls(tuple(float(k.get("time", 0.0)) for k in keys),
                       tuple(Camera.from_dict(k["camera"]) for k in keys), d.get("mode", "hold"))
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed camera path: {e}") from None


# ----------------------------------------------------------------------------
# manifest


@dataclass
class ObjectEntry:
    id: str
    asset: str
    object_prompt: str = ""
    motion_prompt: str = ""
    clip: str | None = None
    height: float | None = None
    plan: str | None = None
    placement: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectEntry":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"object entry has unknown fields {sorted(unknown)}")
        if not d.get("id") or not d.get("asset"):
            raise ConfigError("every object needs an id and an asset")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class SceneManifest:
    """Declarative composition job."""
    scene_asset: str
    objects: list
    camera: str | dict | None
    root: Path = field(default_factory=Path.cwd)
    prompt: str = ""
    scene_prompt: str = ""
    frame_count: int = DEFAULT_FRAMES
    width: int = DEFAULT_RESOLUTION[0]
    height: int = DEFAULT_RESOLUTION[1]
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    up_axis: str = "-y"
    library: str | None = None
    director: dict = field(default_factory=dict)
    provider: dict = field(default_factory=dict)
    refine: dict = field(default_factory=dict)
    depth: dict = field(default_factory=dict)
    n_path_points: int = 8

    def __post_init__(self):
        if int(self.frame_count) < 1:
            raise ConfigError("frame_count must be at least 1")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ConfigError("resolution must be positive")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate object ids in manifest: {ids}")

    # paths ------------------------------------------------------------------
    def resolve(self, ref) -> Path:
        p = Path(ref)
        return p if p.is_absolute() else self.root / p

    def object(self, object_id: str) -> ObjectEntry:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise ConfigError(f"unknown object id {object_id!r}")

    def camera_path(self) -> CameraPath:
        if self.camera is None:
            raise ConfigError("manifest has no camera path")
        d = self.camera if isinstance(self.camera, dict) else read_json(
            self.resolve(self.camera), "camera path")
        return CameraPath.from_dict(d).with_resolution(self.width, self.height)

    # io ---------------------------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict, root) -> "SceneManifest":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported manifest schema_version {d.get('schema_version')!r}; "
                              f"expected {SCHEMA_VERSION}")
        try:
            scene = d["scene"]
            out = d.get("output", {})
            res = out.get("resolution", list(DEFAULT_RESOLUTION))
            return cls(
                scene_asset=scene["asset"],
                scene_prompt=scene.get("prompt", ""),
                objects=[ObjectEntry.from_dict(o) for o in d.get("objects", [])],
                camera=d.get("camera"),
                root=Path(root),
                prompt=d.get("prompt", ""),
                frame_count=int(d.get("frame_count", DEFAULT_FRAMES)),
                width=int(res[0]), height=int(res[1]),
                background=tuple(out.get("background", (0.0, 0.0, 0.0))),
                seed=int(d.get("seed", 0)),
                up_axis=d.get("up_axis", "-y"),
                library=d.get("library"),
                director=dict(d.get("director", {})),
                provider=dict(d.get("provider", {})),
                refine=dict(d.get("refine", {})),
                depth=dict(d.get("depth", {})),
                n_path_points=int(d.get("n_path_points", 8)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"malformed manifest: {e}") from None

    @classmethod
    def load(cls, path) -> "SceneManifest":
        path = Path(path)
        return cls.from_dict(read_json(path, "manifest"), path.parent.resolve())

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "scene": {"asset": self.scene_asset, "prompt": self.scene_prompt},
            "objects": [o.to_dict() for o in self.objects],
            "camera": self.camera,
            "frame_count": self.frame_count,
            "output": {"resolution": [self.width, self.height],
                       "background": list(self.background)},
            "seed": self.seed,
            "up_axis": self.up_axis,
            "n_path_points": self.n_path_points,
            "prompt": self.prompt,
            "director": self.director,
            "provider": self.provider,
            "refine": self.refine,
        }
        if self.depth:
            d["depth"] = self.depth
        if self.library is not None:
            d["library"] = self.library
        return d

    def save(self, path) -> None:
        write_json(path, self.to_dict())


def swap_asset(manifest: SceneManifest, object_id: str | None = None, *, asset: str | None = None,
               motion_prompt: str | None = None, scene_asset: str | None = None,
               replan: bool = False, outputs=None) -> SceneManifest:
    """Edited copy of ``manifest``.

    Changing the scene asset clears every object's plan and placement
    references. Changing an object's asset or motion keeps its plan unless
    ``replan`` is set; a new motion prompt also drops any pinned clip so the
    motion is looked up again. With ``outputs`` (a previous run's output
    directory) a kept plan that was only implicit is pinned to the file there.
    """
    m = copy.deepcopy(manifest)
    if scene_asset is not None:
        m.scene_asset = scene_asset
        for o in m.objects:
            o.plan = None
            o.placement = None
    if object_id is not None:
        o = m.object(object_id)
        if asset is not None:
            o.asset = asset
        if motion_prompt is not None:
            o.motion_prompt = motion_prompt
            o.clip = None
        if replan:
            o.plan = None
            o.placement = None
        elif outputs is not None and o.plan is None:
            prior = Path(outputs) / "plan" / f"{o.id}.json"
            if prior.is_file():
                o.plan = str(prior.resolve())
    elif asset is not None or motion_prompt is not None:
        raise ConfigError("object_id is required to swap an object asset or motion")
    return m
