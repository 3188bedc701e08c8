"""Procedural test scene: a checkered courtyard, a cube avatar and two clips.

``python -m gscompose.synthetic OUTDIR [--goldens]`` writes the scene, asset
library, camera path, director fixtures and manifest used by the end-to-end
tests, and optionally the SHA-256 of every frame a clean ``compose`` produces.
"""
from __future__ import annotations

import argparse
import math
import tempfile
from pathlib import Path

import numpy as np

from .assets import AnimationClip
from .core import Camera, GaussianCloud, matrix_to_quat, project_point, quat_multiply
from .director import DEFAULT_TEMPLATES, write_fixture_file
from .manifest import SCHEMA_VERSION, SceneManifest, sha256_file, write_json
from .ply import write_ply

PROMPT = "a cube walking across a checkered courtyard"
OBJECT_PROMPT = "a cube"
MOTION_PROMPT = "walking"
GROUND_Y = 1.0  # world +y points down, so the ground is below the camera
IDQ = np.array([1.0, 0.0, 0.0, 0.0])


def _cloud(pos, log_scales, colors, opacity_logit=4.0, rotations=None, label=""):
    n = len(pos)
    return GaussianCloud(
        positions=np.asarray(pos, float),
        log_scales=np.broadcast_to(np.asarray(log_scales, float), (n, 3)),
        rotations=np.tile(IDQ, (n, 1)) if rotations is None else rotations,
        opacity_logits=np.full(n, float(opacity_logit)),
        colors=np.asarray(colors, float),
        label=label,
    )


def courtyard(rng, nx=110, nz=140) -> GaussianCloud:
    """Checkered ground plus a back wall with a doorway; about 20k Gaussians."""
    xs = np.linspace(-9.0, 9.0, nx)
    zs = np.linspace(-1.0, 22.0, nz)
    X, Z = np.meshgrid(xs, zs)
    ground = np.stack([X.ravel(), np.full(X.size, GROUND_Y), Z.ravel()], 1)
    check = (np.floor(ground[:, 0]) + np.floor(ground[:, 2])) % 2
    gcol = np.where(check[:, None] > 0, [0.55, 0.5, 0.42], [0.3, 0.33, 0.28])
    gcol = np.clip(gcol + rng.normal(0, 0.02, gcol.shape), 0, 1)
    dx = xs[1] - xs[0]
    ground_cloud = _cloud(ground, [math.log(0.6 * dx), math.log(0.01), math.log(0.6 * dx)], gcol,
                          label="ground")

    wx = np.linspace(-9.0, 9.0, 90)
    wy = np.linspace(GROUND_Y - 6.0, GROUND_Y, 50)
    WX, WY = np.meshgrid(wx, wy)
    wall = np.stack([WX.ravel(), WY.ravel(), np.full(WX.size, 16.0)], 1)
    door = (np.abs(wall[:, 0]) < 1.2) & (wall[:, 1] > GROUND_Y - 3.0)
    wall = wall[~door]
    wcol = np.where(((wall[:, 1] * 2).astype(int) % 2 == 0)[:, None], [0.45, 0.28, 0.18],
                    [0.5, 0.32, 0.2])
    step = wx[1] - wx[0]
    wall_cloud = _cloud(wall, [math.log(0.6 * step), math.log(0.6 * step), math.log(0.01)], wcol,
                        label="wall")
    return GaussianCloud.concatenate([ground_cloud, wall_cloud], label="courtyard")


def cube_avatar(n=8) -> GaussianCloud:
    """Unit cube shell of Gaussians, one color per face pair."""
    g = np.linspace(-0.5, 0.5, n)
    P = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    shell = P[np.any(np.isclose(np.abs(P), 0.5), axis=1)]
    col = np.full((len(shell), 3), 0.85)
    col[np.isclose(np.abs(shell[:, 0]), 0.5)] = [0.85, 0.2, 0.15]
    col[np.isclose(np.abs(shell[:, 2]), 0.5)] = [0.15, 0.35, 0.85]
    col[np.isclose(shell[:, 1], -0.5)] = [0.95, 0.85, 0.2]  # top face (up is -y)
    return _cloud(shell, math.log(0.6 / (n - 1)), col, opacity_logit=5.0, label="cube")


def walk_clip(n_gauss: int, frames=4) -> AnimationClip:
    """Delta clip: a vertical bob repeating every two frames."""
    out = []
    for i in range(frames):
        bob = -0.06 * (i % 2)
        d = np.zeros((n_gauss, 3))
        d[:, 1] = bob
        out.append(GaussianCloud(d, np.zeros((n_gauss, 3)), np.tile(IDQ, (n_gauss, 1)),
                                 np.zeros(n_gauss), np.full((n_gauss, 3), 0.5), "walk"))
    return AnimationClip("walk", tuple(out), ("walk", "stroll"), 8.0, "delta")


def spin_clip(base: GaussianCloud, frames=4) -> AnimationClip:
    out = []
    for i in range(frames):
        a = 2 * math.pi * i / frames
        R = np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])
        q = matrix_to_quat(R)
        out.append(GaussianCloud(base.positions @ R.T, base.log_scales,
                                 quat_multiply(q[None, :], base.rotations), base.opacity_logits,
                                 base.colors, "dance"))
    return AnimationClip("dance", tuple(out), ("dance", "spin"), 8.0, "full")


def default_camera(width=512, height=512) -> Camera:
    return Camera.look_at((0.0, -1.6, -3.5), (0.0, 0.6, 7.0), width, height, fov_y_deg=55.0)


def director_answers(cam: Camera, n_points=8, height=1.0):
    """Director fixture payloads for a cube walking across the courtyard."""
    ground = np.array([[-2.4 + 4.8 * t, GROUND_Y, 4.0 + 3.0 * t + 1.2 * math.sin(math.pi * t)]
                       for t in np.linspace(0, 1, n_points)])
    start_depth = project_point(cam, ground[0])[1]
    H = round(cam.fy * height / start_depth)
    W = round(cam.fx * height / start_depth)
    corners = []
    for p in ground:
        px, _ = project_point(cam, p)
        corners.append([int(round(px[0] - W / 2)), int(round(px[1]))])
    return {"H": H, "W": W}, corners


def build(out, n_points=8, width=512, height=512, frame_count=24, motion=MOTION_PROMPT,
          corners=None) -> Path:
    """Write the full fixture tree under ``out``; returns the manifest path.

    ``corners`` replaces the director's path answer (pixel lower-left corners).
    """
    out = Path(out)
    rng = np.random.default_rng(7)
    scene = courtyard(rng)
    write_ply(out / "scene.ply", scene)
    cube = cube_avatar()
    write_ply(out / "library" / "assets" / "cube.ply", cube)
    walk_clip(len(cube)).save(out / "library" / "motions" / "walk")
    spin_clip(cube).save(out / "library" / "motions" / "dance")

    cam = default_camera(width, height)
    write_json(out / "camera.json", {"mode": "hold",
                                     "keyframes": [{"time": 0.0, "camera": cam.to_dict()}]})

    scale, planned = director_answers(cam, n_points)
    corners = planned if corners is None else [list(c) for c in corners]
    fields = {"object": OBJECT_PROMPT, "motion": motion}
    t = DEFAULT_TEMPLATES
    entries = [
        ("decompose", t["decompose"].format(prompt=PROMPT),
         {"scene": "a checkered courtyard",
          "objects": [{"id": "cube", "object": OBJECT_PROMPT, "motion": motion}]}),
        ("scale", t["scale"].format(**fields), scale),
        ("endpoints", t["start"].format(**fields), {"start": corners[0]}),
        ("endpoints", t["end"].format(**fields), {"end": corners[-1]}),
        ("path", t["path"].format(**fields), {"points": corners}),
    ]
    write_fixture_file(out / "director.json", entries)

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "prompt": PROMPT,
        "scene": {"asset": "scene.ply", "prompt": "a checkered courtyard"},
        "objects": [{"id": "cube", "asset": "library/assets/cube.ply",
                     "object_prompt": OBJECT_PROMPT, "motion_prompt": motion}],
        "camera": "camera.json",
        "library": "library",
        "frame_count": frame_count,
        "output": {"resolution": [width, height], "background": [0.55, 0.7, 0.9]},
        "seed": 0,
        "up_axis": "-y",
        "n_path_points": n_points,
        "director": {"fixtures": "director.json"},
        "provider": {"name": "zero"},
        "refine": {},
    }
    write_json(out / "manifest.json", manifest)
    return out / "manifest.json"


def frame_hashes(manifest_path, out=None) -> dict:
    """Run the whole job on ``manifest_path`` and hash the frames it writes."""
    from .pipeline import run_stage

    with tempfile.TemporaryDirectory() as tmp:
        files, _ = run_stage(SceneManifest.load(manifest_path), out or tmp, "compose")
        return {p.name: sha256_file(p) for p in files}


def write_goldens(directory) -> Path:
    directory = Path(directory)
    hashes = frame_hashes(directory / "manifest.json")
    write_json(directory / "goldens.json", {"frames": hashes, "resolution": [512, 512]})
    return directory / "goldens.json"


def main(argv=None):
    ap = argparse.ArgumentParser(description="Write the synthetic courtyard fixture.")
    ap.add_argument("out", type=Path)
    ap.add_argument("--goldens", action="store_true", help="also record frame hashes")
    args = ap.parse_args(argv)
    print(build(args.out))
    if args.goldens:
        print(write_goldens(args.out))


if __name__ == "__main__":
    main()
