"""End-to-end job: plan -> lift -> refine -> render, with content-hash caching.

Every stage reads only the files written by the stage before it and stores the
hash of its inputs next to its output, so an unchanged stage is skipped on the
next run and a changed input re-runs exactly the stages downstream of it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import composer
from .assets import AnimationClip, AssetLibrary, best_motion, load_asset
from .composer import (
    PlacementParams, RefineConfig, RefineScene, build_rotation_schedule, load_placement,
    refine_locations, refine_scale,
)
from .core import BBox2D, Camera, GaussianCloud, RigidTransform, axis_vector, project_point
from .director import (
    EndpointEstimate, PathEstimate, ScaleEstimate, build_director, is_static_motion,
    validate_trajectory,
)
from .errors import ConfigError, DepthMissing, GSComposeError, StageError
from .imageio import load_depth, load_mask, load_png_linear, png_bytes, save_png
from .lifting import (
    Trajectory2D, Trajectory3D, _lookup_depth, anchor_pixel, lift_point, lift_trajectory,
    resample_path,
)
from .manifest import (
    SCHEMA_VERSION, SceneManifest, hash_inputs, read_json, sha256_file, write_json,
)
from .rasterizer import DepthMap, Framebuffer, rasterize, render_depth

log = logging.getLogger(__name__)

STAGES = ("plan", "lift", "refine", "render")


def frame_name(f: int) -> str:
    return f"frame_{f:05d}.png"


# ----------------------------------------------------------------------------
# per-frame placement


def nearest_segment(point, polyline) -> int:
    """Index of the polyline segment closest to ``point`` (lowest index on ties)."""
    P = np.asarray(polyline, dtype=np.float64)
    best, best_d = 0, np.inf
    for i in range(len(P) - 1):
        a, b = P[i], P[i + 1]
        ab = b - a
        denom = ab @ ab
        t = 0.0 if denom == 0 else float(np.clip((point - a) @ ab / denom, 0.0, 1.0))
        d = np.linalg.norm(point - (a + t * ab))
        if d < best_d - 1e-12:
            best, best_d = i, d
    return best


@dataclass(eq=False)
class ObjectTrack:
    """How one object moves and looks across the whole timeline."""
    object_id: str
    base: GaussianCloud
    center: np.ndarray
    height: float
    scale: float
    locations: np.ndarray
    rotations: np.ndarray | None = None
    clip: AnimationClip | None = None

    def positions(self, frame_count: int) -> np.ndarray:
        if len(self.locations) == 1 or frame_count == 1:
            return np.repeat(self.locations[:1], frame_count, axis=0)
        return resample_path(self.locations, frame_count)

    def rotation_for(self, position) -> np.ndarray:
        if self.rotations is None:
            return np.eye(3)
        if len(self.locations) < 2:
            return self.rotations[0]
        return self.rotations[nearest_segment(position, self.locations)]

    def cloud_at(self, f: int, frame_count: int) -> GaussianCloud:
        if self.clip is None:
            cloud = self.base
        else:
            cloud = self.clip.cloud(self.clip.frame_index(f, frame_count), self.base)
        return GaussianCloud(cloud.positions - self.center, cloud.log_scales, cloud.rotations,
                             cloud.opacity_logits, cloud.colors, cloud.label)

    def frames(self, frame_count: int):
        """``(cloud, RigidTransform)`` for every frame."""
        out = []
        for f, p in enumerate(self.positions(frame_count)):
            T = RigidTransform(p, self.rotation_for(p), self.scale / self.height)
            out.append((self.cloud_at(f, frame_count), T))
        return out


def compose_frame(scene: GaussianCloud, objects, camera: Camera,
                  background=(0.0, 0.0, 0.0)) -> Framebuffer:
    """Render the scene with each ``(cloud, RigidTransform)`` object placed into it."""
    return rasterize(camera, [scene, *objects], background)


# ----------------------------------------------------------------------------
# the job


@dataclass
class JobOptions:
    director_mode: str = "mock"
    provider: str | None = None
    tau_s: float | None = None
    tau_l: float | None = None
    literal_anchor: bool = False


@dataclass(eq=False)
class Pipeline:
    manifest: SceneManifest
    out: Path
    options: JobOptions = field(default_factory=JobOptions)

    def __post_init__(self):
        self.out = Path(self.out)
        self.provenance = {s: {} for s in STAGES}
        self._cache = {}

    # shared inputs -------------------------------------------------------
    def _memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def scene_cloud(self) -> GaussianCloud:
        return self._memo("scene", lambda: load_asset(self.manifest.resolve(self.manifest.scene_asset)))

    def scene_sha(self) -> str:
        return self._memo("scene_sha", lambda: sha256_file(self.manifest.resolve(self.manifest.scene_asset)))

    def camera_path(self):
        return self._memo("campath", self.manifest.camera_path)

    def planning_camera(self) -> Camera:
        return self.camera_path().at(0.0)

    def scene_image(self) -> bytes:
        return self._memo("scene_png", lambda: png_bytes(rasterize(
            self.planning_camera(), [self.scene_cloud()], self.manifest.background)))

    def scene_depth(self) -> tuple[DepthMap, bool]:
        def load():
            spec = self.manifest.depth
            if spec.get("path"):
                D = load_depth(self.manifest.resolve(spec["path"]), float(spec.get("scale", 1.0)))
                cam = self.planning_camera()
                if (D.width, D.height) != (cam.width, cam.height):
                    raise ConfigError("external depth image does not match the output resolution")
                return D, True
            return render_depth(self.planning_camera(), [self.scene_cloud()]), False
        return self._memo("depth", load)

    def library(self) -> AssetLibrary | None:
        if self.manifest.library is None:
            return None
        return self._memo("library", lambda: AssetLibrary.open(self.manifest.resolve(self.manifest.library)))

    def clip_for(self, entry) -> tuple[AnimationClip | None, str | None]:
        """The object's motion clip and a content hash of it."""
        def find():
            if entry.clip:
                lib = self.library()
                if lib is not None and ("motion", entry.clip) in lib.entries:
                    path = lib.path("motion", entry.clip)
                else:
                    path = self.manifest.resolve(entry.clip)
                return AnimationClip.load(path), sha256_file(path)
            lib = self.library()
            motion = self.prompts(entry)[1]
            if lib is None or is_static_motion(motion):
                return None, None
            ident = best_motion(motion, {i: lib.tags.get(i, ()) for i in lib.motions()})
            return lib.clip(ident), sha256_file(lib.path("motion", ident))
        return self._memo(("clip", entry.id), find)

    def asset_cloud(self, entry) -> GaussianCloud:
        return self._memo(("asset", entry.id), lambda: load_asset(self.manifest.resolve(entry.asset)))

    def prompts(self, entry) -> tuple[str, str]:
        if entry.object_prompt:
            return entry.object_prompt, entry.motion_prompt
        if not self.manifest.prompt:
            raise ConfigError(f"object {entry.id!r} has no prompt and the manifest has none to split")
        dec = self._memo("decomposition", lambda: self.director().decompose(self.manifest.prompt))
        write_json(self.out / "plan" / "decomposition.json", {
            "scene": dec.scene_prompt, "objects": list(dec.object_prompts),
            "motions": list(dec.motion_prompts), "ids": list(dec.object_ids)})
        ids = list(dec.object_ids)
        idx = ids.index(entry.id) if entry.id in ids else self.manifest.objects.index(entry)
        if idx >= len(ids):
            raise ConfigError(f"prompt decomposition has no concept for object {entry.id!r}")
        return dec.object_prompts[idx], dec.motion_prompts[idx]

    def director(self):
        def build():
            d = self.manifest.director
            fixtures = self.manifest.resolve(d["fixtures"]) if d.get("fixtures") else None
            return build_director(self.options.director_mode, fixtures=fixtures,
                                  audit_path=self.out / "audit.ndjson",
                                  templates=d.get("templates"),
                                  max_retries=int(d.get("max_retries", 2)))
        return self._memo("director", build)

    def director_fingerprint(self) -> dict:
        d = self.manifest.director
        fp = {"mode": self.options.director_mode, "templates": d.get("templates"),
              "max_retries": d.get("max_retries", 2)}
        if self.options.director_mode == "mock" and d.get("fixtures"):
            fp["fixtures"] = sha256_file(self.manifest.resolve(d["fixtures"]))
        return fp

    # stage plumbing --------------------------------------------------------
    def _run(self, stage, entry, path, inputs, produce, pinned=None):
        """Write ``produce()`` to ``path`` unless a file there already matches ``inputs``."""
        oid = entry.id if entry is not None else None
        try:
            if pinned is not None:
                self.provenance[stage][oid] = "pinned"
                return Path(pinned)
            h = hash_inputs(inputs)
            if path.is_file():
                try:
                    old = read_json(path)
                except ConfigError:
                    old = {}
                if old.get("inputs_hash") == h:
                    log.info("%s %s: cached", stage, oid)
                    self.provenance[stage][oid] = "cached"
                    return path
            doc = produce()
            doc["inputs_hash"] = h
            write_json(path, doc)
            self.provenance[stage][oid] = "ran"
            log.info("%s %s: wrote %s", stage, oid, path)
            return path
        except StageError:
            raise
        except GSComposeError as e:
            raise StageError(stage, e, oid) from e

    def _plan_file(self, entry) -> Path:
        if entry.plan:
            return self.manifest.resolve(entry.plan)
        return self.out / "plan" / f"{entry.id}.json"

    def _lift_file(self, entry) -> Path:
        return self.out / "lift" / f"{entry.id}.json"

    def _placement_file(self, entry) -> Path:
        if entry.placement:
            return self.manifest.resolve(entry.placement)
        return self.out / "refine" / f"{entry.id}.json"

    # stages ------------------------------------------------------------------
    def plan(self):
        m = self.manifest
        for entry in m.objects:
            def inputs():
                obj, mot = self.prompts(entry)
                return {"stage": "plan", "scene": self.scene_sha(),
                        "camera": self.planning_camera().to_dict(),
                        "object": obj, "motion": mot, "n_points": m.n_path_points,
                        "director": self.director_fingerprint()}
            try:
                ins = None if entry.plan else inputs()
            except GSComposeError as e:
                raise StageError("plan", e, entry.id) from e
            self._run("plan", entry, self._plan_file(entry), ins,
                      lambda: self._plan_object(entry), pinned=entry.plan)

    def _plan_object(self, entry) -> dict:
        cam = self.planning_camera()
        obj, mot = self.prompts(entry)
        static = is_static_motion(mot)
        session = self.director().session(obj, mot, self.scene_image(), cam.width, cam.height)
        scale = session.estimate_scale()
        ends = session.estimate_endpoints(moving=not static)
        if static:
            path = PathEstimate((ends.start_px,))
        else:
            raw = session.estimate_path(self.manifest.n_path_points)
            path = validate_trajectory(raw, (cam.width, cam.height), scale, ends)
        return plan_document(entry.id, obj, mot, static, scale, ends, path, session.refs,
                             (cam.width, cam.height))

    def lift(self):
        for entry in self.manifest.objects:
            plan_path = self._plan_file(entry)
            try:
                ins = {"stage": "lift", "plan": sha256_file(plan_path), "scene": self.scene_sha(),
                       "camera": self.planning_camera().to_dict(), "height": entry.height,
                       "up_axis": self.manifest.up_axis, "literal": self.options.literal_anchor,
                       "depth": self.manifest.depth,
                       "depth_sha": (sha256_file(self.manifest.resolve(self.manifest.depth["path"]))
                                     if self.manifest.depth.get("path") else None)}
            except GSComposeError as e:
                raise StageError("lift", ConfigError(f"plan for {entry.id!r} missing: {e}"),
                                 entry.id) from e
            self._run("lift", entry, self._lift_file(entry), ins,
                      lambda: self._lift_object(entry, read_json(plan_path, "plan")))

    def _lift_object(self, entry, plan: dict) -> dict:
        cam = self.planning_camera()
        D, external = self.scene_depth()
        bbox = BBox2D(plan["scale"]["H"], plan["scale"]["W"])
        points = [tuple(p) for p in plan["points"]]
        up = self.manifest.up_axis
        literal = self.options.literal_anchor
        try:
            d0, _ = _lookup_depth(D, anchor_pixel(points[0], bbox, literal))
        except DepthMissing as e:
            raise DepthMissing(f"path point 0: {e}", index=0, object_id=entry.id) from None
        base_scale = composer.base_scale_from_bbox(bbox, d0, cam.fy)
        H3 = float(entry.height) if entry.height else base_scale
        if len(points) == 1:
            info = []
            p = lift_point(cam, points[0], D, bbox, H3, up, literal,
                           "external" if external else None, info)
            traj = Trajectory3D(p[None, :], up, H3, (info[0][0],), (info[0][1],))
        else:
            traj = lift_trajectory(cam, Trajectory2D(points, bbox), D, H3, up, literal, external)
        err = reprojection_error(cam, traj)
        log.info("lift %s: %d points, max reprojection error %.3g px", entry.id, len(traj), err)
        return {"schema_version": SCHEMA_VERSION, "object_id": entry.id, **traj.to_dict(),
                "bbox": {"H": bbox.height_px, "W": bbox.width_px}, "base_scale": base_scale,
                "static": bool(plan.get("static")), "reprojection_error_px": err}

    def provider(self, entry):
        spec = dict(self.manifest.provider)
        name = self.options.provider or spec.get("name", "zero")
        gain = float(spec.get("gain", 1.0))
        per = spec.get("objects", {}).get(entry.id, {})
        if name == "zero":
            return composer.ZeroProvider()
        if name == "pull":
            target = per.get("target") or spec.get("target")
            if not target:
                raise ConfigError("pull provider needs a target image")
            return composer.PullToTargetProvider(load_png_linear(self.manifest.resolve(target)),
                                                 float(per.get("gain", gain)))
        if name == "pixel":
            px = per.get("target_px") or spec.get("target_px")
            if px is None:
                raise ConfigError("pixel provider needs target_px")
            return composer.PullToPixelProvider(tuple(px), float(per.get("gain", gain)))
        if name == "silhouette":
            target = per.get("target_mask") or spec.get("target_mask")
            if not target:
                raise ConfigError("silhouette provider needs a target mask")
            return composer.SilhouetteProvider(load_mask(self.manifest.resolve(target)),
                                               float(per.get("gain", gain)))
        if name == "ground":
            horizon = per.get("horizon", spec.get("horizon"))
            if horizon is None:
                raise ConfigError("ground provider needs a horizon row")
            return composer.GroundContactProvider(float(horizon), float(per.get("gain", gain)))
        if name == "remote":
            return composer.RemoteProvider(self.director().transport)
        raise ConfigError(f"unknown score provider {name!r}")

    def provider_fingerprint(self, entry) -> dict:
        spec = dict(self.manifest.provider)
        name = self.options.provider or spec.get("name", "zero")
        fp = {"name": name, "spec": spec}
        for key in ("target", "target_mask"):
            ref = spec.get("objects", {}).get(entry.id, {}).get(key) or spec.get(key)
            if ref and name in ("pull", "silhouette"):
                fp[key + "_sha"] = sha256_file(self.manifest.resolve(ref))
        return fp

    def refine_config(self) -> RefineConfig:
        r = self.manifest.refine
        try:
            return RefineConfig(step=float(r.get("step", 0.05)),
                                max_iters=int(r.get("max_iters", 200)),
                                tol=float(r.get("tol", 1e-5)), patience=int(r.get("patience", 10)),
                                fd_step=r.get("fd_step"), joint=bool(r.get("joint", False)),
                                seed=self.manifest.seed)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad refine settings: {e}") from None

    def thresholds(self):
        r = self.manifest.refine
        tau_s = self.options.tau_s if self.options.tau_s is not None else r.get("tau_s")
        tau_l = self.options.tau_l if self.options.tau_l is not None else r.get("tau_l")
        return tau_s, tau_l

    def refine(self):
        for entry in self.manifest.objects:
            lift_path = self._lift_file(entry)

            def inputs():
                clip, clip_sha = self.clip_for(entry)
                return {"stage": "refine", "lift": sha256_file(lift_path),
                        "asset": sha256_file(self.manifest.resolve(entry.asset)), "clip": clip_sha,
                        "scene": self.scene_sha(), "camera": self.planning_camera().to_dict(),
                        "provider": self.provider_fingerprint(entry),
                        "config": self.refine_config().__dict__, "tau": self.thresholds(),
                        "prompt": entry.object_prompt, "background": list(self.manifest.background)}
            try:
                ins = None if entry.placement else inputs()
            except GSComposeError as e:
                raise StageError("refine", e, entry.id) from e
            self._run("refine", entry, self._placement_file(entry), ins,
                      lambda: self._refine_object(entry, read_json(lift_path, "lifted trajectory")),
                      pinned=entry.placement)

    def object_base(self, entry):
        """(frame-0 cloud, its bbox center) for an object."""
        base = self.asset_cloud(entry)
        clip, _ = self.clip_for(entry)
        first = base if clip is None else clip.cloud(0, base)
        lo, hi = first.bounds()
        return first, 0.5 * (lo + hi)

    def _refine_object(self, entry, lifted: dict) -> dict:
        cam = self.planning_camera()
        first, _ = self.object_base(entry)
        traj = Trajectory3D.from_dict(lifted)
        tau_s, tau_l = self.thresholds()
        params = PlacementParams.initial(lifted["base_scale"], traj.points, tau_s, tau_l,
                                         object_height=traj.height)
        schedule = None
        if len(traj) >= 2:
            schedule = build_rotation_schedule(traj.points, self.manifest.up_axis)
        scene = RefineScene(cam, first, [self.scene_cloud()], self.manifest.up_axis,
                            entry.object_prompt, tuple(self.manifest.background),
                            None if schedule is None else schedule.matrices)
        provider = self.provider(entry)
        config = self.refine_config()
        r1 = refine_scale(params, scene, provider, config)
        r2 = refine_locations(r1.params, scene, provider, config)
        final = None
        if len(traj) >= 2:
            final = build_rotation_schedule(r2.params, self.manifest.up_axis)
        doc = composer.placement_to_dict(r2.params, final, r1.trace + r2.trace, self.manifest.up_axis)
        doc.update({"schema_version": SCHEMA_VERSION, "object_id": entry.id,
                    "asset_height": scene.asset_height, "iterations": len(r1.trace) + len(r2.trace)})
        return doc

    def _placement(self, entry):
        """Refined placement, or the lifted point itself for a static object never refined."""
        path = self._placement_file(entry)
        if path.is_file():
            return load_placement(path)
        lift_path = self._lift_file(entry)
        if lift_path.is_file():
            lifted = read_json(lift_path)
            if lifted.get("static"):
                traj = Trajectory3D.from_dict(lifted)
                return (PlacementParams.initial(lifted["base_scale"], traj.points,
                                                object_height=traj.height), None, traj.up_axis)
        raise ConfigError(f"no placement for object {entry.id!r} at {path}; run refine first")

    def tracks(self) -> list[ObjectTrack]:
        out = []
        for entry in self.manifest.objects:
            params, schedule, up = self._placement(entry)
            first, center = self.object_base(entry)
            ext = first.positions @ axis_vector(up)
            height = float(ext.max() - ext.min())
            if not height > 0:
                raise ConfigError(f"object {entry.id!r} has no extent along the up axis")
            clip, _ = self.clip_for(entry)
            out.append(ObjectTrack(entry.id, self.asset_cloud(entry), center, height,
                                   params.effective_scale(), params.effective_locations(),
                                   None if schedule is None else schedule.matrices, clip))
        return out

    def render_inputs(self) -> dict:
        m = self.manifest
        objs = {}
        for entry in m.objects:
            _, clip_sha = self.clip_for(entry)
            pf = self._placement_file(entry)
            objs[entry.id] = {"placement": sha256_file(pf if pf.is_file() else self._lift_file(entry)),
                              "asset": sha256_file(m.resolve(entry.asset)), "clip": clip_sha}
        return {"stage": "render", "scene": self.scene_sha(), "objects": objs,
                "camera": self.camera_path().to_dict(), "frame_count": m.frame_count,
                "resolution": [m.width, m.height], "background": list(m.background)}

    def render(self) -> list[Path]:
        m = self.manifest
        frames_dir = self.out / "frames"
        run_path = self.out / "run.json"
        try:
            ins = self.render_inputs()
            h = hash_inputs(ins)
            files = [frames_dir / frame_name(f) for f in range(m.frame_count)]
            if run_path.is_file():
                old = read_json(run_path)
                recorded = {r["file"]: r["sha256"] for r in old.get("frames", [])}
                if (old.get("render_inputs_hash") == h and all(
                        p.is_file() and recorded.get(p.name) == sha256_file(p) for p in files)):
                    log.info("render: cached")
                    self.provenance["render"][None] = "cached"
                    self._write_run(h, files)
                    return files
            tracks = self.tracks()
            per_object = [t.frames(m.frame_count) for t in tracks]
            path = self.camera_path()
            scene = self.scene_cloud()
            for f in range(m.frame_count):
                cam = path.at(path.frame_time(f, m.frame_count))
                fb = compose_frame(scene, [fr[f] for fr in per_object], cam, m.background)
                save_png(fb, files[f])
            for stale in frames_dir.glob("frame_*.png"):
                if stale not in files:
                    stale.unlink()
            self.provenance["render"][None] = "ran"
            self._write_run(h, files)
            log.info("render: wrote %d frames to %s", m.frame_count, frames_dir)
            return files
        except StageError:
            raise
        except GSComposeError as e:
            raise StageError("render", e) from e

    def _write_run(self, render_hash, files):
        m = self.manifest
        inputs = {"scene": self.scene_sha()}
        for entry in m.objects:
            inputs[f"asset:{entry.id}"] = sha256_file(m.resolve(entry.asset))
            inputs[f"clip:{entry.id}"] = self.clip_for(entry)[1]
            for stage, p in (("plan", self._plan_file(entry)), ("lift", self._lift_file(entry)),
                             ("placement", self._placement_file(entry))):
                inputs[f"{stage}:{entry.id}"] = sha256_file(p) if p.is_file() else None
        if m.director.get("fixtures"):
            inputs["director_fixtures"] = sha256_file(m.resolve(m.director["fixtures"]))
        doc = {
            "schema_version": SCHEMA_VERSION,
            "config_hash": hash_inputs({"manifest": m.to_dict(), "options": self.options.__dict__}),
            "render_inputs_hash": render_hash,
            "seed": m.seed,
            "frame_count": m.frame_count,
            "resolution": [m.width, m.height],
            "inputs": inputs,
            "stages": {s: {str(k): v for k, v in d.items()} for s, d in self.provenance.items()},
            "frames": [{"file": p.name, "sha256": sha256_file(p)} for p in files],
        }
        write_json(self.out / "run.json", doc)

    def compose(self) -> list[Path]:
        self.plan()
        self.lift()
        self.refine()
        return self.render()


# ----------------------------------------------------------------------------
# helpers


def plan_document(object_id, object_prompt, motion_prompt, static, scale: ScaleEstimate,
                  ends: EndpointEstimate, path: PathEstimate, refs, image_size) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "object_id": object_id,
        "object_prompt": object_prompt,
        "motion_prompt": motion_prompt,
        "static": static,
        "image_size": list(image_size),
        "scale": {"H": scale.bbox.height_px, "W": scale.bbox.width_px, "flags": list(scale.flags)},
        "endpoints": {"start": list(ends.start_px), "end": list(ends.end_px),
                      "flags": list(ends.flags)},
        "points": [list(p) for p in path.points],
        "flags": list(path.flags),
        "audit_refs": list(refs),
    }


def reprojection_error(cam: Camera, traj: Trajectory3D) -> float:
    """Largest pixel distance between each anchor and its lifted ground point."""
    if not traj.anchors:
        return 0.0
    up = axis_vector(traj.up_axis)
    worst = 0.0
    for p, a in zip(traj.points, traj.anchors):
        px, _ = project_point(cam, p - 0.5 * traj.height * up)
        worst = max(worst, float(np.hypot(*(px - np.asarray(a)))))
    return worst


def run_stage(manifest: SceneManifest, out, stage: str, options: JobOptions | None = None):
    pipe = Pipeline(manifest, out, options or JobOptions())
    if stage == "compose":
        return pipe.compose(), pipe
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    return getattr(pipe, stage)(), pipe
