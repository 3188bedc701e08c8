import numpy as np
import pytest

from gscompose.core import BBox2D, Camera, project_point
from gscompose.errors import ConfigError, DepthMissing
from gscompose.lifting import (
    Trajectory2D, Trajectory3D, anchor_pixel, lift_point, lift_trajectory, resample_path,
)
from gscompose.rasterizer import DepthMap, render_depth
from scipy.spatial.transform import Rotation

from conftest import facing_disc, random_camera, random_point_in_view


def const_depth(value, w=256, h=256):
    return DepthMap(w, h, np.full((h, w), float(value)), np.ones((h, w), bool))


def test_lift_point_hand_example(simple_camera):
    # anchor (128, 128) at depth 10 unprojects to the optical axis
    p = lift_point(simple_camera, (128, 128), const_depth(10.0), None, H_3D=2.0, up_axis="-y")
    np.testing.assert_allclose(p, [0.0, -1.0, 10.0], atol=1e-12)


def test_anchor_is_bottom_center():
    np.testing.assert_allclose(anchor_pixel((100, 400), BBox2D(128, 64)), [132, 400])
    np.testing.assert_allclose(anchor_pixel((100, 400), BBox2D(128, 64), literal_offset=True), [164, 400])


def test_lift_round_trip_rendered_depth(rng):
    cam = random_camera(rng)
    for _ in range(5):
        X = random_point_in_view(rng, cam)
        D = render_depth(cam, [facing_disc(cam, X)])
        px, _ = project_point(cam, X)
        lifted = lift_point(cam, px, D)
        np.testing.assert_allclose(lifted, X, atol=1e-4)
        np.testing.assert_allclose(project_point(cam, lifted)[0], px, atol=0.5)


def test_neighborhood_search_and_missing(simple_camera):
    vals = np.full((256, 256), 7.0)
    valid = np.zeros((256, 256), bool)
    valid[130, 129] = True
    D = DepthMap(256, 256, vals, valid)
    info = []
    p = lift_point(simple_camera, (128, 128), D, _info=info)
    assert p[2] == pytest.approx(7.0)
    assert info[0][1] == "neighborhood"
    valid[130, 129] = False
    valid[131, 128] = True  # 3 rows away, outside the 5x5 window
    with pytest.raises(DepthMissing):
        lift_point(simple_camera, (128, 128), D)


def plane_depth(cam, plane_y):
    """Analytic camera-space depth of the world plane y = plane_y for every pixel."""
    ys, xs = np.mgrid[0:cam.height, 0:cam.width].astype(float)
    rays_cam = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)], -1)
    R = cam.world_to_cam_rotation
    rays_world = rays_cam @ R  # R.T applied to each ray
    origin = cam.center
    # depth z along the ray: origin + z * rays_world hits y = plane_y
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (plane_y - origin[1]) / rays_world[..., 1]
    valid = np.isfinite(z) & (z > 0)
    return DepthMap(cam.width, cam.height, np.where(valid, z, 0.0), valid)


def test_lift_trajectory_onto_ground_plane():
    cam = Camera.look_at((0.0, -3.0, -8.0), (0.0, 1.0, 4.0), 512, 512)
    D = plane_depth(cam, 1.0)
    traj = Trajectory2D(((100, 400), (210, 395), (320, 388), (420, 380)), BBox2D(128, 64))
    out = lift_trajectory(cam, traj, D, H_3D=0.0)
    assert len(out) == 4
    np.testing.assert_allclose(out.points[:, 1], 1.0, atol=1e-3)
    assert out.depth_sources == ("exact",) * 4
    raised = lift_trajectory(cam, traj, D, H_3D=2.0)
    np.testing.assert_allclose(raised.points[:, 1], 0.0, atol=1e-3)


def test_lift_trajectory_two_points_and_missing_index(simple_camera):
    D = const_depth(5.0)
    traj = Trajectory2D(((10, 10), (200, 100)), BBox2D(20, 20))
    assert len(lift_trajectory(simple_camera, traj, D, 1.0)) == 2
    valid = np.ones((256, 256), bool)
    valid[:, 150:] = False
    holes = DepthMap(256, 256, np.full((256, 256), 5.0), valid)
    traj = Trajectory2D(((10, 10), (60, 50), (200, 100)), BBox2D(20, 20))
    with pytest.raises(DepthMissing) as err:
        lift_trajectory(simple_camera, traj, holes, 1.0)
    assert err.value.index == 2


def test_lifting_equivariant_under_world_rotation(rng):
    cam = random_camera(rng)
    X = random_point_in_view(rng, cam)
    disc = facing_disc(cam, X)
    Q = Rotation.from_rotvec(rng.normal(size=3)).as_matrix()
    cam_rot = cam.with_pose(cam.world_to_cam_rotation @ Q.T, cam.world_to_cam_translation)
    disc_rot = facing_disc(cam_rot, Q @ X)
    px = project_point(cam, X)[0]
    a = lift_point(cam, px, render_depth(cam, [disc]), BBox2D(20, 10), 1.5, "-y")
    b = lift_point(cam_rot, px, render_depth(cam_rot, [disc_rot]), BBox2D(20, 10), 1.5, "-y")
    up = np.array([0.0, -1.0, 0.0])
    np.testing.assert_allclose(Q @ (a - 0.75 * up) + 0.75 * up, b, atol=1e-6)


def test_trajectory3d_round_trip_dict():
    t = Trajectory3D(np.arange(6.0).reshape(2, 3), "-y", 2.0, ((1.0, 2.0), (3.0, 4.0)), ("exact", "external"))
    assert Trajectory3D.from_dict(t.to_dict()).to_dict() == t.to_dict()


@pytest.mark.parametrize("mode", ["constant_speed", "uniform_parameter"])
def test_resample_collinear(mode):
    pts = np.array([[0, 0, 0], [1, 2, 3], [2, 4, 6], [3, 6, 9]], float)
    out = resample_path(Trajectory3D(pts), 17, mode)
    assert out.shape == (17, 3)
    d = np.array([1.0, 2.0, 3.0]) / np.sqrt(14)
    off_line = out - np.outer(out @ d, d)
    assert np.abs(off_line).max() <= 1e-9
    np.testing.assert_array_equal(out[0], pts[0])
    np.testing.assert_array_equal(out[-1], pts[-1])


def test_resample_two_points_equal_spacing():
    out = resample_path(np.array([[0.0, 0, 0], [4.0, 0, 0]]), 5, "constant_speed")
    np.testing.assert_allclose(out[:, 0], [0, 1, 2, 3, 4], atol=1e-4)
    np.testing.assert_allclose(out[:, 1:], 0.0, atol=1e-12)


def test_resample_right_angle_constant_speed():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [1.0, 0, 1.0]])
    out = resample_path(pts, 9, "constant_speed")
    # oracle: arc length of the same spline from very dense sampling
    from gscompose.lifting import _catmull_rom
    dense = _catmull_rom(pts, np.linspace(0, 2, 200001))
    total = np.linalg.norm(np.diff(dense, axis=0), axis=1).sum()
    chords = np.linalg.norm(np.diff(out, axis=0), axis=1)
    assert np.abs(chords - total / 8).max() <= 0.01 * total


@pytest.mark.parametrize("n", [0, 1, 2.5])
def test_resample_bad_frame_count(n):
    with pytest.raises(ConfigError):
        resample_path(np.zeros((2, 3)) + [[0, 0, 0], [1, 0, 0]], n)
