"""Command-line entry point.

    gscompose {plan,lift,refine,render,compose,validate} --manifest M --out DIR [options]

Exit codes: 0 ok, 1 unexpected failure, 2 configuration, 3 director,
4 trajectory validation, 5 missing depth, 6 refinement diverged, 7 render.
The last line written to stderr is always a single JSON status object.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, GSComposeError, StageError
from .manifest import SceneManifest, read_json, sha256_file
from .pipeline import STAGES, JobOptions, Pipeline

COMMANDS = (*STAGES, "compose", "validate")
PROVIDERS = ("zero", "pull", "pixel", "silhouette", "ground", "remote")

log = logging.getLogger("gscompose")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _resolution(text: str):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return w, h


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--manifest", required=True, type=Path, help="scene manifest (JSON)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--director", choices=("mock", "live"), default="mock",
                        help="mock replays the manifest's fixture file; live posts to "
                             "$C3V_DIRECTOR_URL (bearer token from $C3V_DIRECTOR_KEY)")
    common.add_argument("--provider", choices=PROVIDERS, help="score provider override")
    common.add_argument("--seed", type=int, help="random seed override")
    common.add_argument("--frames", type=int, help="frame count override")
    common.add_argument("--res", type=_resolution, metavar="WxH", help="output resolution")
    common.add_argument("--n-path-points", type=int, help="path points requested from the director")
    common.add_argument("--tau-s", type=float, help="scale threshold (default 0.4 x base scale)")
    common.add_argument("--tau-l", type=float,
                        help="location threshold (default 0.3 x object height)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")

    ap = _Parser(prog="gscompose", description="Compose 3D Gaussian objects into a scene and "
                                                "render the result as a frame sequence.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {"plan": "ask the director for scale, endpoints and path per object",
             "lift": "lift planned pixel paths into 3D",
             "refine": "optimize object scale and locations against the score provider",
             "render": "render the frame sequence",
             "compose": "run plan, lift, refine and render, skipping up-to-date stages",
             "validate": "check that the manifest and every file it names can be loaded"}
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
    return ap


def load_job(args) -> tuple[SceneManifest, JobOptions]:
    m = SceneManifest.load(args.manifest)
    m = copy.deepcopy(m)
    if args.seed is not None:
        m.seed = args.seed
    if args.frames is not None:
        if args.frames < 1:
            raise ConfigError("--frames must be at least 1")
        m.frame_count = args.frames
    if args.res is not None:
        m.width, m.height = args.res
    if args.n_path_points is not None:
        if args.n_path_points < 2:
            raise ConfigError("--n-path-points must be at least 2")
        m.n_path_points = args.n_path_points
    opts = JobOptions(director_mode=args.director, provider=args.provider,
                      tau_s=args.tau_s, tau_l=args.tau_l)
    return m, opts


def validate(manifest: SceneManifest, options: JobOptions) -> dict:
    """Load every referenced file once; returns a summary."""
    pipe = Pipeline(manifest, Path("."), options)
    summary = {"scene_gaussians": len(pipe.scene_cloud()), "objects": {}}
    pipe.camera_path()
    if options.director_mode == "mock":
        fixtures = manifest.director.get("fixtures")
        if not fixtures:
            raise ConfigError("mock director mode needs director.fixtures in the manifest")
        sha256_file(manifest.resolve(fixtures))
    pipe.library()
    for entry in manifest.objects:
        info = {"gaussians": len(pipe.asset_cloud(entry))}
        for key in ("plan", "placement"):
            ref = getattr(entry, key)
            if ref:
                read_json(manifest.resolve(ref), key)
                info[key] = str(manifest.resolve(ref))
        if entry.clip or entry.motion_prompt:
            clip, _ = pipe.clip_for(entry)
            info["clip"] = None if clip is None else clip.name
        pipe.provider(entry)
        summary["objects"][entry.id] = info
    return summary


def run(args) -> dict:
    manifest, options = load_job(args)
    if args.command == "validate":
        return {"validated": validate(manifest, options)}
    pipe = Pipeline(manifest, args.out, options)
    if args.command == "compose":
        result = pipe.compose()
    else:
        result = getattr(pipe, args.command)()
    status = {"stages": {s: {str(k): v for k, v in d.items()}
                         for s, d in pipe.provenance.items() if d}}
    if args.command in ("render", "compose"):
        status["frames"] = len(result)
    return status


def _status(command, code, **extra):
    line = {"status": "ok" if code == 0 else "error", "command": command, "exit_code": code}
    line.update(extra)
    return json.dumps(line, sort_keys=True)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        print(_status(command, 2, message=str(e)), file=sys.stderr)
        return 2

    level = logging.DEBUG if args.verbose > 1 else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)
    if args.verbose == 0:
        logging.getLogger("numba").setLevel(logging.WARNING)
    try:
        extra = run(args)
    except StageError as e:
        log.error("%s", e)
        print(_status(args.command, e.exit_code, stage=e.stage, object=e.object_id,
                      message=str(e.cause), index=getattr(e.cause, "index", None)),
              file=sys.stderr)
        return e.exit_code
    except GSComposeError as e:
        log.error("%s", e)
        print(_status(args.command, e.exit_code, message=str(e)), file=sys.stderr)
        return e.exit_code
    except Exception as e:  # noqa: BLE001 - last-resort status line
        log.exception("unexpected failure")
        print(_status(args.command, 1, message=f"{type(e).__name__}: {e}"), file=sys.stderr)
        return 1
    print(_status(args.command, 0, **extra), file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
