import math

import numpy as np
import pytest

from objreid.geometry import CameraIntrinsics, Pose


@pytest.fixture
def cam():
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0,
                            width=640, height=480)


def random_pose(rng, scale=10.0):
    q = rng.standard_normal(4)
    return Pose(q / np.linalg.norm(q), rng.uniform(-scale, scale, 3))


def fibonacci_sphere(n):
    """Near-uniform unit directions; deterministic, good covering radius."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def sample_projected_bbox(ellipsoid, cam, cam_pose, n):
    """Oracle bbox: project n surface samples and take the pixel extremes."""
    dirs = fibonacci_sphere(n)
    world = ellipsoid.pose.apply(dirs * ellipsoid.semi_axes)
    local = cam_pose.inverse().apply(world)
    assert np.all(local[:, 2] > 0), "oracle requires the whole surface in front"
    u = cam.fx * local[:, 0] / local[:, 2] + cam.cx
    v = cam.fy * local[:, 1] / local[:, 2] + cam.cy
    return u.min(), v.min(), u.max(), v.max()
