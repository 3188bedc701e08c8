import numpy as np
import pytest

from gscompose.core import Camera, GaussianCloud


def random_cloud(rng, n, spread=2.0, log_scale=(-3.5, -1.5), label="rand"):
    return GaussianCloud(
        positions=rng.uniform(-spread, spread, (n, 3)),
        log_scales=rng.uniform(*log_scale, (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        opacity_logits=rng.normal(0.0, 2.0, n),
        colors=rng.uniform(0, 1, (n, 3)),
        label=label,
    )


def random_camera(rng, width=256, height=256, target=(0.0, 0.0, 0.0)):
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    eye = np.asarray(target) + direction * rng.uniform(5.0, 8.0)
    down = (0.0, 1.0, 0.0) if abs(direction[1]) < 0.9 else (1.0, 0.0, 0.0)
    return Camera.look_at(eye, target, width, height, fov_y_deg=rng.uniform(40, 70), down=down)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def simple_camera():
    return Camera(100.0, 100.0, 128.0, 128.0, 256, 256)


def facing_disc(cam, point, radius=50.0, opacity_logit=6.0):
    """One flat Gaussian through ``point`` parallel to the image plane.

    Its rendered depth is exactly the point's camera-space z wherever it covers.
    """
    from gscompose.core import matrix_to_quat

    q = matrix_to_quat(cam.world_to_cam_rotation.T)
    return GaussianCloud(
        positions=np.asarray(point, float).reshape(1, 3),
        log_scales=np.log([[radius, radius, 1e-3]]),
        rotations=q.reshape(1, 4),
        opacity_logits=np.array([opacity_logit]),
        colors=np.array([[0.8, 0.8, 0.8]]),
        label="disc",
    )


def random_point_in_view(rng, cam, depth_range=(3.0, 12.0), margin=16):
    from gscompose.core import unproject

    px = rng.uniform(margin, cam.width - margin), rng.uniform(margin, cam.height - margin)
    return unproject(cam, px, rng.uniform(*depth_range))
