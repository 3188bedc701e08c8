import numpy as np
import pytest
from PIL import Image

from gscompose.errors import ConfigError
from gscompose.imageio import (
    linear_to_srgb, load_depth, load_mask, load_png_linear, load_raw_planar, png_bytes,
    save_depth, save_png, save_raw_planar, srgb_to_linear,
)
from gscompose.ply import SH_C0, read_ply, write_ply
from gscompose.rasterizer import DepthMap, Framebuffer

from conftest import random_cloud


def _f32(a):
    return np.asarray(a, np.float32).astype(np.float64)


def test_ply_roundtrip_is_float32_exact(tmp_path, rng):
    cloud = random_cloud(rng, 200)
    write_ply(tmp_path / "a.ply", cloud)
    back = read_ply(tmp_path / "a.ply")
    assert len(back) == 200 and back.label == "a"
    np.testing.assert_array_equal(back.positions, _f32(cloud.positions))
    np.testing.assert_array_equal(back.log_scales, _f32(cloud.log_scales))
    np.testing.assert_array_equal(back.opacity_logits, _f32(cloud.opacity_logits))
    np.testing.assert_allclose(back.colors, cloud.colors, atol=1e-6)
    np.testing.assert_allclose(np.abs((back.rotations * cloud.rotations).sum(1)), 1.0, atol=1e-6)


def test_ply_ignores_higher_order_sh(tmp_path):
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"] + [f"f_rest_{i}" for i in range(9)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    arr = np.zeros(2, dtype=[(n, "<f4") for n in names])
    arr["z"] = [1.0, 2.0]
    arr["f_dc_0"] = 1.0 / SH_C0 * 0.25
    arr["rot_0"] = 1.0
    arr["f_rest_3"] = 99.0
    header = "ply\nformat binary_little_endian 1.0\ncomment from a trainer\nelement vertex 2\n"
    header += "".join(f"property float {n}\n" for n in names) + "end_header\n"
    (tmp_path / "x.ply").write_bytes(header.encode() + arr.tobytes())
    cloud = read_ply(tmp_path / "x.ply")
    np.testing.assert_allclose(cloud.colors[:, 0], 0.75, atol=1e-6)
    np.testing.assert_array_equal(cloud.positions[:, 2], [1.0, 2.0])


@pytest.mark.parametrize("header, match", [
    ("ply\nformat ascii 1.0\nelement vertex 0\nend_header\n", "binary_little_endian"),
    ("ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n",
     "missing"),
    ("obj\n", "not a PLY"),
])
def test_ply_rejects_bad_files(tmp_path, header, match):
    (tmp_path / "bad.ply").write_bytes(header.encode() + b"\0" * 4)
    with pytest.raises(ConfigError, match=match):
        read_ply(tmp_path / "bad.ply")


def test_ply_truncated_body(tmp_path, rng):
    write_ply(tmp_path / "a.ply", random_cloud(rng, 10))
    data = (tmp_path / "a.ply").read_bytes()
    (tmp_path / "a.ply").write_bytes(data[:-20])
    with pytest.raises(ConfigError, match="truncated"):
        read_ply(tmp_path / "a.ply")


def test_srgb_roundtrip():
    x = np.linspace(0, 1, 1001)
    np.testing.assert_allclose(srgb_to_linear(linear_to_srgb(x)), x, atol=1e-12)
    assert linear_to_srgb(np.array([0.0031308]))[0] == pytest.approx(0.0031308 * 12.92)


def test_png_is_deterministic_and_loads_back(tmp_path):
    px = np.random.default_rng(0).uniform(0, 1, (8, 12, 3))
    fb = Framebuffer(12, 8, px, np.zeros((8, 12)))
    assert png_bytes(fb) == png_bytes(fb)
    save_png(fb, tmp_path / "f.png")
    assert Image.open(tmp_path / "f.png").size == (12, 8)
    back = load_png_linear(tmp_path / "f.png")
    assert np.abs(linear_to_srgb(back) - linear_to_srgb(px)).max() <= 0.5 / 255 + 1e-12


def test_raw_planar_layout(tmp_path):
    px = np.arange(2 * 3 * 3, dtype=np.float64).reshape(2, 3, 3)
    save_raw_planar(Framebuffer(3, 2, px, np.zeros((2, 3))), tmp_path / "f.raw")
    flat = np.frombuffer((tmp_path / "f.raw").read_bytes(), "<f4")
    np.testing.assert_array_equal(flat[:6], px[..., 0].ravel())
    np.testing.assert_array_equal(load_raw_planar(tmp_path / "f.raw", 3, 2), px)
    with pytest.raises(ConfigError):
        load_raw_planar(tmp_path / "f.raw", 4, 2)


def test_depth_tiff_roundtrip_and_scale(tmp_path):
    vals = np.array([[1.5, 0.0], [2.25, 7.0]])
    D = DepthMap(2, 2, vals, vals > 0)
    save_depth(D, tmp_path / "d.tif")
    back = load_depth(tmp_path / "d.tif", scale=2.0)
    np.testing.assert_array_equal(back.values, vals * 2)
    np.testing.assert_array_equal(back.valid, vals > 0)


def test_depth_npy_marks_nonfinite_invalid(tmp_path):
    np.save(tmp_path / "d.npy", np.array([[np.nan, -1.0, 3.0]]))
    D = load_depth(tmp_path / "d.npy")
    assert D.valid.tolist() == [[False, False, True]]


def test_mask_loader(tmp_path):
    Image.fromarray(np.array([[0, 255]], np.uint8), mode="L").save(tmp_path / "m.png")
    np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), [[0.0, 1.0]])
    with pytest.raises(ConfigError):
        load_mask(tmp_path / "nope.png")
