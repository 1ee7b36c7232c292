"""SE(3) poses, pinhole camera, and the ellipsoid -> dual-quadric -> dual-conic
projection chain that turns global 3D instance boxes into 2D bounding boxes.

Conventions:
  - quaternions are (w, x, y, z), unit norm, float64
  - a Pose maps local coordinates to world: p_world = R @ p_local + t
  - camera frame is z-forward, x-right, y-down; pixels via K = [[fx,0,cx],[0,fy,cy],[0,0,1]]
  - all math is 64-bit
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, DegenerateConicError, GeometryError
from . import _kernels


# ---------------------------------------------------------------------------
# quaternion helpers

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise GeometryError("zero quaternion")
    return q / n


def quat_multiply(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m):
    """Rotation matrix -> unit quaternion (w >= 0 branch-stable)."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                      (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                      0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_from_yaw(yaw):
    """Rotation about the world z (vertical) axis."""
    return np.array([math.cos(yaw / 2.0), 0.0, 0.0, math.sin(yaw / 2.0)])


def quat_slerp(qa, qb, alpha):
    """Spherical-linear interpolation on the shortest arc, alpha in [0, 1]."""
    qa = np.asarray(qa, dtype=np.float64)
    qb = np.asarray(qb, dtype=np.float64)
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb = -qb
        dot = -dot
    if dot > 1.0 - 1e-12:
        # nearly parallel: lerp avoids 0/0
        return quat_normalize(qa + alpha * (qb - qa))
    theta = math.acos(min(dot, 1.0))
    s = math.sin(theta)
    return quat_normalize(
        qa * (math.sin((1.0 - alpha) * theta) / s) + qb * (math.sin(alpha * theta) / s))


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: unit quaternion (w,x,y,z) + translation in meters."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @staticmethod
    def identity():
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_yaw(yaw, t=(0.0, 0.0, 0.0)):
        return Pose(quat_from_yaw(yaw), np.asarray(t, dtype=np.float64))

    def rotation(self):
        return quat_to_matrix(self.q)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation()
        m[:3, 3] = self.t
        return m

    def compose(self, other: "Pose") -> "Pose":
        return Pose(quat_multiply(self.q, other.q), self.rotation() @ other.t + self.t)

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.q)
        return Pose(qi, -(quat_to_matrix(qi) @ self.t))

    def apply(self, points):
        """Transform one point (3,) or many (n,3) into the parent frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation().T + self.t

    def yaw(self):
        """Heading about the world vertical; exact for yaw-only rotations."""
        r = self.rotation()
        return math.atan2(r[1, 0], r[0, 0])

    def __repr__(self):
        return f"Pose(q={self.q.tolist()}, t={self.t.tolist()})"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    def k_matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Box3D:
    """Upright 3D box: center (m), full extents (m), yaw about vertical."""

    center: np.ndarray
    dims: np.ndarray
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "dims", np.asarray(self.dims, dtype=np.float64).reshape(3))
        object.__setattr__(self, "yaw", float(self.yaw))


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    pose: Pose
    semi_axes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "semi_axes",
                           np.asarray(self.semi_axes, dtype=np.float64).reshape(3))
        if np.any(self.semi_axes <= 0):
            raise GeometryError("semi-axes must be positive")


@dataclass(frozen=True, eq=False)
class DualQuadric:
    """Dual (plane-tangent) quadric; Q is 4x4 symmetric."""

    Q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.Q, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "Q", (q + q.T) / 2.0)

    def center(self):
        if abs(self.Q[3, 3]) < 1e-15:
            raise GeometryError("dual quadric has no finite center")
        return self.Q[:3, 3] / self.Q[3, 3]


@dataclass(frozen=True, eq=False)
class DualConic:
    """Dual (line-tangent) conic; C is 3x3 symmetric."""

    C: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.C, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "C", (c + c.T) / 2.0)


@dataclass(frozen=True)
class BBox2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError("degenerate 2D box")

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def center(self):
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def clipped(self, width, height):
        """Intersection with the image rectangle; None if empty."""
        x0, y0 = max(self.x_min, 0.0), max(self.y_min, 0.0)
        x1, y1 = min(self.x_max, float(width)), min(self.y_max, float(height))
        if x0 >= x1 or y0 >= y1:
            return None
        return BBox2D(x0, y0, x1, y1)


# ---------------------------------------------------------------------------
# operations

def inscribe_ellipsoid(box: Box3D) -> Ellipsoid:
    """Largest ellipsoid inside the box: same pose, semi-axes = dims / 2."""
    if np.any(box.dims <= 0):
        raise GeometryError(f"box dims must be positive, got {box.dims.tolist()}")
    return Ellipsoid(Pose.from_yaw(box.yaw, box.center), box.dims / 2.0)


def dual_quadric_from_ellipsoid(e: Ellipsoid) -> DualQuadric:
    """Q = Z diag(s1^2, s2^2, s3^2, -1) Z^T with Z the homogeneous pose."""
    z = e.pose.matrix()
    d = np.diag(np.concatenate([e.semi_axes ** 2, [-1.0]]))
    return DualQuadric(z @ d @ z.T)


def project_point(point_world, cam: CameraIntrinsics, cam_pose: Pose):
    """World point -> (u, v, depth) in pixels / meters."""
    p = cam_pose.inverse().apply(np.asarray(point_world, dtype=np.float64))
    depth = p[2]
    if depth == 0.0:
        return math.inf, math.inf, 0.0
    return (cam.fx * p[0] / depth + cam.cx, cam.fy * p[1] / depth + cam.cy, depth)


def project_quadric(q: DualQuadric, cam: CameraIntrinsics, cam_pose_world: Pose) -> DualConic:
    """Project a dual quadric through P = K [R|t]: C = P Q P^T.

    [R|t] is the world-to-camera transform (inverse of the camera pose).
    Requires the quadric center strictly in front of the camera.
    """
    center_cam = cam_pose_world.inverse().apply(q.center())
    if center_cam[2] <= 0.0:
        raise BehindCameraError(f"quadric center depth {center_cam[2]:.6g} <= 0")
    w2c = cam_pose_world.inverse().matrix()[:3, :]
    p = cam.k_matrix() @ w2c
    c = p @ q.Q @ p.T
    return DualConic((c + c.T) / 2.0)


def conic_to_bbox(c: DualConic) -> BBox2D:
    """Tight axis-aligned bounding box of the ellipse a dual conic represents.

    Sign convention: C is normalized so C[2,2] < 0, under which a point p on
    the image plane is interior iff p^T C^{-1} p < 0. Tangent vertical lines
    solve C11 - 2 x C13 + x^2 C33 = 0, giving
        x = (C13 -+ sqrt(C13^2 - C11 C33)) / C33
    and analogously for y. Negative discriminants mean the conic is a
    hyperbola/degenerate (object cut by the principal plane).
    """
    m = c.C
    if abs(m[2, 2]) < 1e-15:
        raise DegenerateConicError("conic has C33 = 0 (parabolic/degenerate)")
    if m[2, 2] > 0:
        m = -m
    disc_x = m[0, 2] ** 2 - m[0, 0] * m[2, 2]
    disc_y = m[1, 2] ** 2 - m[1, 1] * m[2, 2]
    if disc_x < 0 or disc_y < 0:
        raise DegenerateConicError(
            f"negative discriminant (dx={disc_x:.6g}, dy={disc_y:.6g}); not a real ellipse")
    sx, sy = math.sqrt(disc_x), math.sqrt(disc_y)
    # C33 < 0 flips the ordering when dividing
    x_min, x_max = (m[0, 2] + sx) / m[2, 2], (m[0, 2] - sx) / m[2, 2]
    y_min, y_max = (m[1, 2] + sy) / m[2, 2], (m[1, 2] - sy) / m[2, 2]
    if not (x_min < x_max and y_min < y_max):
        raise DegenerateConicError("conic collapsed to zero extent")
    return BBox2D(x_min, y_min, x_max, y_max)


def in_fov(point_world, cam: CameraIntrinsics, cam_pose: Pose, margin_px=0.0) -> bool:
    """True iff the point is in front of the camera and projects inside the
    image rectangle expanded by margin_px on every side (inclusive)."""
    u, v, depth = project_point(point_world, cam, cam_pose)
    if depth <= 0.0:
        return False
    return (-margin_px <= u <= cam.width + margin_px
            and -margin_px <= v <= cam.height + margin_px)


def points_in_box(cloud, box: Box3D) -> int:
    """Count points whose box-frame coordinates lie within +-dims/2 (inclusive)."""
    pts = np.ascontiguousarray(np.asarray(cloud, dtype=np.float64).reshape(-1, 3))
    if pts.shape[0] == 0:
        return 0
    return int(_kernels.points_in_box_count(pts, box.center, box.dims, box.yaw))


def viewpoint_delta(query_cam: Pose, ref_cam: Pose, object_center):
    """Distance difference (m) and angle (deg) between the object->camera rays."""
    o = np.asarray(object_center, dtype=np.float64)
    rq = query_cam.t - o
    rr = ref_cam.t - o
    nq, nr = np.linalg.norm(rq), np.linalg.norm(rr)
    if nq == 0.0 or nr == 0.0:
        raise GeometryError("camera coincides with object center")
    cos_a = float(np.dot(rq, rr) / (nq * nr))
    alpha = math.degrees(math.acos(min(1.0, max(-1.0, cos_a))))
    return abs(nq - nr), alpha
