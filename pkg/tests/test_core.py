import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gscompose.core import (
    Camera, Gaussian3D, GaussianCloud, RigidTransform, apply_transform, covariance_of,
    project_point, unproject,
)
from gscompose.errors import BehindCameraError, ConfigError, InvalidGaussianError

from conftest import random_camera, random_cloud

IDQ = (1.0, 0.0, 0.0, 0.0)


def gaussian(log_scale=(0, 0, 0), rotation=IDQ, position=(0, 0, 0)):
    return Gaussian3D(np.array(position, float), np.array(log_scale, float), np.array(rotation, float),
                      0.0, np.array([0.5, 0.5, 0.5]))


def test_covariance_unit():
    np.testing.assert_allclose(covariance_of(gaussian()), np.eye(3), atol=1e-15)


def test_covariance_axis_aligned():
    np.testing.assert_allclose(covariance_of(gaussian((math.log(2), 0, 0))), np.diag([4.0, 1, 1]), atol=1e-12)


def test_covariance_rotated_about_z():
    half = math.pi / 4
    g = gaussian((math.log(2), 0, 0), (math.cos(half), 0, 0, math.sin(half)))
    # oracle: explicit 90 degree z rotation matrix
    R = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    expected = R @ np.diag([4.0, 1.0, 1.0]) @ R.T
    np.testing.assert_allclose(expected, np.diag([1.0, 4.0, 1.0]))
    np.testing.assert_allclose(covariance_of(g), expected, atol=1e-12)


def test_covariance_rejects_non_finite():
    with pytest.raises(InvalidGaussianError):
        gaussian((np.nan, 0, 0))
    with pytest.raises(InvalidGaussianError):
        gaussian(position=(np.inf, 0, 0))


quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3)
log_scales = st.lists(st.floats(-5, 2), min_size=3, max_size=3)


@given(quats, log_scales)
def test_covariance_spd_symmetric_and_sign_invariant(q, s):
    a = covariance_of(gaussian(s, q))
    b = covariance_of(gaussian(s, -np.asarray(q)))
    assert np.max(np.abs(a - a.T)) <= 1e-12
    assert np.all(np.linalg.eigvalsh(a) > 0)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_quaternion_normalized_on_load():
    g = gaussian(rotation=(2.0, 0.0, 0.0, 0.0))
    assert abs(np.linalg.norm(g.rotation) - 1) <= 1e-6
    cloud = GaussianCloud.from_gaussians([g, gaussian(rotation=(0, 3, 4, 0))])
    np.testing.assert_allclose(np.linalg.norm(cloud.rotations, axis=1), 1.0, atol=1e-12)


def _pairwise(p):
    return np.linalg.norm(p[:, None] - p[None], axis=-1)


def test_apply_identity_is_bitwise_noop(rng):
    cloud = random_cloud(rng, 20)
    out = apply_transform(cloud, RigidTransform.identity())
    for f in ("positions", "log_scales", "rotations", "opacity_logits", "colors"):
        assert getattr(out, f).tobytes() == getattr(cloud, f).tobytes()


def test_apply_translation(rng):
    cloud = random_cloud(rng, 20)
    out = apply_transform(cloud, RigidTransform(translation=(1, 2, 3)))
    np.testing.assert_allclose(out.positions - cloud.positions, np.tile([1.0, 2, 3], (20, 1)), atol=1e-12)
    np.testing.assert_allclose(_pairwise(out.positions), _pairwise(cloud.positions), atol=1e-12)


def test_apply_uniform_scale(rng):
    cloud = random_cloud(rng, 15)
    out = apply_transform(cloud, RigidTransform(uniform_scale=2.0))
    np.testing.assert_allclose(_pairwise(out.positions), 2 * _pairwise(cloud.positions), atol=1e-12)
    np.testing.assert_allclose(out.covariances(), 4 * cloud.covariances(), rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(out.opacity_logits, cloud.opacity_logits)
    np.testing.assert_array_equal(out.colors, cloud.colors)


def _random_transform(rng):
    from scipy.spatial.transform import Rotation
    return RigidTransform(rng.normal(size=3), Rotation.random(random_state=rng.integers(1 << 30)).as_matrix(),
                          rng.uniform(0.3, 3.0))


def test_apply_rotation_rotates_covariance(rng):
    cloud = random_cloud(rng, 10)
    T = _random_transform(rng)
    out = apply_transform(cloud, T)
    expected = T.uniform_scale ** 2 * T.rotation @ cloud.covariances() @ T.rotation.T
    np.testing.assert_allclose(out.covariances(), expected, atol=1e-12)


def test_apply_transform_is_group_action(rng):
    cloud = random_cloud(rng, 25)
    for _ in range(20):
        t1, t2 = _random_transform(rng), _random_transform(rng)
        once = apply_transform(cloud, t1.then(t2))
        twice = apply_transform(apply_transform(cloud, t1), t2)
        np.testing.assert_allclose(once.positions, twice.positions, atol=1e-9)
        np.testing.assert_allclose(once.log_scales, twice.log_scales, atol=1e-9)
        np.testing.assert_allclose(once.covariances(), twice.covariances(), atol=1e-9)
        # quaternions agree up to sign
        dots = np.abs(np.sum(once.rotations * twice.rotations, axis=1))
        np.testing.assert_allclose(dots, 1.0, atol=1e-9)


def test_rigid_transform_validation():
    with pytest.raises(ConfigError):
        RigidTransform(uniform_scale=0.0)
    with pytest.raises(ConfigError):
        RigidTransform(rotation=np.diag([1.0, 1.0, -1.0]))


def test_project_on_axis(simple_camera):
    px, d = project_point(simple_camera, [0, 0, 7.5])
    np.testing.assert_allclose(px, [128, 128])
    assert d == 7.5


def test_project_pinhole_value(simple_camera):
    px, d = project_point(simple_camera, [1, 0, 10])
    # hand oracle: 100 * 1 / 10 + 128 = 138
    np.testing.assert_allclose(px, [138.0, 128.0], atol=1e-12)
    assert d == 10


def test_project_behind_camera(simple_camera):
    with pytest.raises(BehindCameraError):
        project_point(simple_camera, [0, 0, -1])
    with pytest.raises(BehindCameraError):
        project_point(simple_camera, [0, 0, 0])


def test_project_unproject_round_trip(rng):
    for _ in range(200):
        cam = random_camera(rng)
        p = rng.uniform(-1, 1, 3)
        px, d = project_point(cam, p)
        np.testing.assert_allclose(unproject(cam, px, d), p, atol=1e-6)


def test_camera_validation():
    with pytest.raises(ConfigError):
        Camera(0, 1, 0, 0, 10, 10)
    with pytest.raises(ConfigError):
        Camera(1, 1, 20, 0, 10, 10)
    with pytest.raises(ConfigError):
        Camera(1, 1, 0, 0, 0, 10)


def test_look_at_faces_target():
    cam = Camera.look_at([3, -1, -4], [0, 0, 0], 64, 48)
    px, d = project_point(cam, [0, 0, 0])
    np.testing.assert_allclose(px, [32, 24], atol=1e-9)
    assert d == pytest.approx(math.sqrt(26))
    # world +y appears as image +y (down)
    below, _ = project_point(cam, [0, 0.5, 0])
    assert below[1] > 24
