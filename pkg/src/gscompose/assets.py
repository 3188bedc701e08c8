"""Asset registry, animation clips and tag-based motion lookup."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import GaussianCloud, quat_multiply
from .errors import ConfigError, MotionNotFound
from .ply import read_ply, write_ply

CLIP_DESCRIPTOR = "clip.json"
CLIP_MODES = ("full", "delta")


@dataclass(frozen=True, eq=False)
class AnimationClip:
    """Frame-indexed Gaussians for one motion.

    In ``full`` mode every frame is a complete cloud. In ``delta`` mode each
    frame stores per-Gaussian offsets (position, log-scale, opacity logit,
    color) and a left-multiplied rotation, applied to a base cloud supplied at
    evaluation time.
    """
    name: str
    frames: tuple
    tags: tuple = ()
    fps: float = 8.0
    mode: str = "full"

    def __post_init__(self):
        if self.mode not in CLIP_MODES:
            raise ConfigError(f"clip {self.name!r}: unknown mode {self.mode!r}")
        if len(self.frames) < 1:
            raise ConfigError(f"clip {self.name!r} has no frames")
        if self.mode == "delta" and len({len(f) for f in self.frames}) != 1:
            raise ConfigError(f"clip {self.name!r}: delta frames differ in Gaussian count")

    def __len__(self):
        return len(self.frames)

    def frame_index(self, f: int, frame_count: int) -> int:
        """Clip frame shown at video frame ``f``; the last frame holds on overrun."""
        if frame_count < 1 or f < 0:
            raise ConfigError("frame index out of range")
        return min(f * len(self) // frame_count, len(self) - 1)

    def cloud(self, i: int, base: GaussianCloud | None = None) -> GaussianCloud:
        frame = self.frames[i]
        if self.mode == "full":
            return frame
        if base is None:
            raise ConfigError(f"delta clip {self.name!r} needs a base cloud")
        if len(base) != len(frame):
            raise ConfigError(f"delta clip {self.name!r} has {len(frame)} Gaussians, "
                              f"asset has {len(base)}")
        return GaussianCloud(
            positions=base.positions + frame.positions,
            log_scales=base.log_scales + frame.log_scales,
            rotations=quat_multiply(frame.rotations, base.rotations),
            opacity_logits=base.opacity_logits + frame.opacity_logits,
            colors=np.clip(base.colors + frame.colors - 0.5, 0.0, 1.0),
            label=base.label,
        )

    @classmethod
    def load(cls, directory) -> "AnimationClip":
        directory = Path(directory)
        desc_path = directory / CLIP_DESCRIPTOR
        if not desc_path.is_file():
            raise ConfigError(f"clip descriptor not found: {desc_path}")
        try:
            desc = json.loads(desc_path.read_text())
            names = desc["frames"]
        except (ValueError, KeyError) as e:
            raise ConfigError(f"{desc_path}: malformed clip descriptor: {e}") from None
        frames = tuple(read_ply(directory / n, label=directory.name) for n in names)
        return cls(desc.get("name", directory.name), frames, tuple(desc.get("tags", ())),
                   float(desc.get("fps", 8.0)), desc.get("mode", "full"))

    def save(self, directory) -> None:
        """Delta frames are stored as PLYs whose colors are offsets around 0.5."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for i, frame in enumerate(self.frames):
            names.append(f"frame_{i:03d}.ply")
            write_ply(directory / names[-1], frame)
        desc = {"name": self.name, "tags": list(self.tags), "fps": self.fps, "mode": self.mode,
                "frames": names}
        (directory / CLIP_DESCRIPTOR).write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")


def load_asset(path) -> GaussianCloud:
    return read_ply(path)


# ----------------------------------------------------------------------------
# motion retrieval

_SUFFIXES = ("ing", "ed", "es", "s")


def stem(word: str) -> str:
    """Crude suffix stripper: walking, walks, walked -> walk; dancing, dance -> danc."""
    w = word.lower()
    for suf in _SUFFIXES:
        if w.endswith(suf) and len(w) - len(suf) >= 3 and not w.endswith("ss"):
            w = w[: -len(suf)]
            break
    if len(w) >= 4 and w[-1] == w[-2] and w[-1] not in "aeiousl":
        w = w[:-1]  # running -> runn -> run
    if len(w) > 3 and w.endswith("e"):
        w = w[:-1]
    return w


def tokens(text: str) -> set:
    return {stem(t) for t in re.findall(r"[a-zA-Z]+", text)}


def tag_score(prompt: str, tags) -> float:
    tagset = {stem(t) for t in tags}
    if not tagset:
        return 0.0
    return len(tokens(prompt) & tagset) / len(tagset)


class AssetLibrary:
    """Registry of ``(kind, identifier) -> path`` backed by a directory.

    If the directory holds ``library.json`` (entries with kind, id, path and
    optional tags) that index is used; otherwise ``assets/*.ply`` are assets
    and ``motions/<id>/clip.json`` are motion clips.
    """

    def __init__(self, root, entries: dict, tags: dict):
        self.root = Path(root)
        self.entries = entries
        self.tags = tags

    @classmethod
    def open(cls, root) -> "AssetLibrary":
        root = Path(root)
        if not root.is_dir():
            raise ConfigError(f"asset library not found: {root}")
        entries, tags = {}, {}
        index = root / "library.json"
        if index.is_file():
            for e in json.loads(index.read_text()).get("entries", []):
                key = (e["kind"], e["id"])
                if key in entries:
                    raise ConfigError(f"duplicate {e['kind']} identifier {e['id']!r} in {index}")
                entries[key] = root / e["path"]
                if e["kind"] == "motion":
                    tags[e["id"]] = tuple(e.get("tags", ()))
        else:
            for p in sorted((root / "assets").glob("*.ply")):
                entries[("asset", p.stem)] = p
            for p in sorted((root / "motions").glob(f"*/{CLIP_DESCRIPTOR}")):
                entries[("motion", p.parent.name)] = p.parent
                tags[p.parent.name] = tuple(json.loads(p.read_text()).get("tags", ()))
        return cls(root, entries, tags)

    def path(self, kind: str, ident: str) -> Path:
        try:
            return self.entries[(kind, ident)]
        except KeyError:
            raise ConfigError(f"no {kind} named {ident!r} in library {self.root}") from None

    def motions(self):
        return sorted(i for k, i in self.entries if k == "motion")

    def clip(self, ident: str) -> AnimationClip:
        return AnimationClip.load(self.path("motion", ident))


def best_motion(prompt: str, candidates: dict) -> str:
    """Identifier with the highest tag score; ties go to the smallest identifier."""
    if not candidates:
        raise MotionNotFound("motion library is empty")
    scored = sorted((-tag_score(prompt, tags), ident) for ident, tags in candidates.items())
    neg, ident = scored[0]
    if neg >= 0:
        raise MotionNotFound(f"no motion clip matches {prompt!r}")
    return ident


def retrieve_motion(prompt: str, library: AssetLibrary) -> AnimationClip:
    return library.clip(best_motion(prompt, {i: library.tags.get(i, ()) for i in library.motions()}))
