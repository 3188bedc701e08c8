import json

import numpy as np
import pytest

from gscompose.assets import (
    AnimationClip, AssetLibrary, best_motion, retrieve_motion, stem, tag_score, tokens,
)
from gscompose.core import GaussianCloud
from gscompose.errors import ConfigError, MotionNotFound
from gscompose.ply import write_ply

from conftest import random_cloud


@pytest.mark.parametrize("word, expected", [
    ("walking", "walk"), ("walks", "walk"), ("walked", "walk"), ("walk", "walk"),
    ("running", "run"), ("dancing", "danc"), ("dance", "danc"), ("pass", "pass"),
    ("spins", "spin"),
])
def test_stem(word, expected):
    assert stem(word) == expected


def test_tokens_split_and_stem():
    assert tokens("Walking, slowly!") == {"walk", "slowly"}


def test_walking_slowly_picks_walk():
    assert best_motion("walking slowly", {"walk": ("walk",), "dance": ("dance",)}) == "walk"


def test_no_overlap_is_an_error():
    with pytest.raises(MotionNotFound):
        best_motion("backflip", {"walk": ("walk",), "dance": ("dance",)})
    with pytest.raises(MotionNotFound):
        best_motion("walk", {})


def test_score_prefers_tighter_tag_set():
    # |{dance}| = 1 -> 1.0 against 1/2 for {dance, spin}
    assert tag_score("dance", ("dance",)) == 1.0
    assert tag_score("dance", ("dance", "spin")) == 0.5
    assert best_motion("dance", {"a_spin": ("dance", "spin"), "z_dance": ("dance",)}) == "z_dance"


def test_ties_go_to_smallest_identifier():
    assert best_motion("walk", {"b": ("walk",), "a": ("walk",)}) == "a"


def _delta(n, dy, color=0.5):
    return GaussianCloud(np.tile([0.0, dy, 0.0], (n, 1)), np.zeros((n, 3)),
                         np.tile([1.0, 0, 0, 0], (n, 1)), np.zeros(n), np.full((n, 3), color))


@pytest.mark.parametrize("f, n, clip_len, expected", [
    (0, 24, 4, 0), (5, 24, 4, 0), (6, 24, 4, 1), (23, 24, 4, 3),
    (2, 3, 4, 2), (0, 1, 4, 0), (9, 10, 1, 0),
])
def test_frame_index(f, n, clip_len, expected, rng):
    clip = AnimationClip("c", tuple(_delta(3, 0.0) for _ in range(clip_len)), mode="delta")
    assert clip.frame_index(f, n) == expected


def test_delta_clip_applies_offsets(rng):
    base = random_cloud(rng, 5)
    clip = AnimationClip("bob", (_delta(5, 0.0), _delta(5, -0.25, color=0.6)), mode="delta")
    assert clip.cloud(0, base).positions.tolist() == base.positions.tolist()
    moved = clip.cloud(1, base)
    np.testing.assert_allclose(moved.positions - base.positions, [[0, -0.25, 0]] * 5)
    np.testing.assert_allclose(moved.colors, np.clip(base.colors + 0.1, 0, 1))
    with pytest.raises(ConfigError):
        clip.cloud(0, random_cloud(rng, 4))
    with pytest.raises(ConfigError):
        clip.cloud(0)


def test_clip_validation():
    with pytest.raises(ConfigError):
        AnimationClip("empty", ())
    with pytest.raises(ConfigError):
        AnimationClip("mixed", (_delta(3, 0), _delta(4, 0)), mode="delta")


def test_clip_save_load_roundtrip(tmp_path, rng):
    frames = (random_cloud(rng, 6), random_cloud(rng, 6))
    AnimationClip("jump", frames, ("jump", "hop"), 12.0).save(tmp_path / "jump")
    back = AnimationClip.load(tmp_path / "jump")
    assert (back.name, back.tags, back.fps, back.mode, len(back)) == ("jump", ("jump", "hop"),
                                                                      12.0, "full", 2)
    np.testing.assert_allclose(back.frames[1].positions, frames[1].positions, atol=1e-6)


def _library(root, rng):
    write_ply(root / "assets" / "cube.ply", random_cloud(rng, 4))
    AnimationClip("walk", (random_cloud(rng, 4),), ("walk", "stroll")).save(root / "motions/walk")
    AnimationClip("dance", (random_cloud(rng, 4),), ("dance",)).save(root / "motions/dance")


def test_directory_library_scan(tmp_path, rng):
    _library(tmp_path, rng)
    lib = AssetLibrary.open(tmp_path)
    assert lib.motions() == ["dance", "walk"]
    assert lib.path("asset", "cube").name == "cube.ply"
    assert retrieve_motion("a dog strolling", lib).name == "walk"
    with pytest.raises(ConfigError):
        lib.path("asset", "sphere")


def test_indexed_library_and_duplicates(tmp_path, rng):
    _library(tmp_path, rng)
    entries = [{"kind": "motion", "id": "amble", "path": "motions/walk", "tags": ["walk"]},
               {"kind": "asset", "id": "box", "path": "assets/cube.ply"}]
    (tmp_path / "library.json").write_text(json.dumps({"entries": entries}))
    lib = AssetLibrary.open(tmp_path)
    assert lib.motions() == ["amble"]
    assert retrieve_motion("walking", lib).name == "walk"
    entries.append(dict(entries[0]))
    (tmp_path / "library.json").write_text(json.dumps({"entries": entries}))
    with pytest.raises(ConfigError, match="duplicate"):
        AssetLibrary.open(tmp_path)
