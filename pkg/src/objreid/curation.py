"""Turn per-frame 3D annotations plus globally aligned trajectories into
globally unique instance labels and 2D observation records.

Stages: lift per-frame boxes to the global frame (pose interpolation),
cluster box centers per class with DBSCAN, fit one median box per cluster,
then project instances into every frame that sees them.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import (DegenerateConicError, EmptyMaskError, GeometryError,
                     TrajectoryRangeError)
from .geometry import (BBox2D, Box3D, CameraIntrinsics, Pose, conic_to_bbox,
                       dual_quadric_from_ellipsoid, in_fov, inscribe_ellipsoid,
                       points_in_box, project_quadric, quat_slerp)

log = logging.getLogger(__name__)

WEATHER_LABELS = ("sunny", "cloudy", "dark", "rainy")


@dataclass(frozen=True)
class FrameAnnotation:
    sequence_id: str
    frame_id: int
    timestamp: float
    cls: str  # serialized as "class"
    box: Box3D


@dataclass(frozen=True)
class TrajectorySample:
    timestamp: float
    pose: Pose


@dataclass(frozen=True)
class GlobalInstance:
    instance_id: int
    cls: str
    box: Box3D
    support_count: int


@dataclass(frozen=True)
class FrameContext:
    """One camera frame eligible for observation generation. The cloud (n,3)
    is in global coordinates; None means no lidar data, which passes the
    cloud-presence filter."""

    sequence_id: str
    frame_id: int
    cam_pose: Pose
    weather: str
    cloud: np.ndarray | None = None

    def __post_init__(self):
        if self.weather not in WEATHER_LABELS:
            raise ValueError(f"weather must be one of {WEATHER_LABELS}, got {self.weather!r}")


@dataclass(frozen=True)
class ObservationRecord:
    obs_id: str
    instance_id: int
    cls: str
    sequence_id: str
    frame_id: int
    weather: str
    bbox2d: BBox2D
    cam_pose: Pose
    object_center: np.ndarray


def interpolate_pose(trajectory, timestamp):
    """Pose at a timestamp: linear translation + slerp rotation between the
    bracketing samples. Extrapolation is refused."""
    if not trajectory:
        raise TrajectoryRangeError("empty trajectory")
    times = [s.timestamp for s in trajectory]
    if timestamp < times[0] or timestamp > times[-1]:
        raise TrajectoryRangeError(
            f"timestamp {timestamp} outside trajectory span [{times[0]}, {times[-1]}]")
    i = bisect.bisect_left(times, timestamp)
    if i < len(times) and times[i] == timestamp:
        return trajectory[i].pose
    a, b = trajectory[i - 1], trajectory[i]
    alpha = (timestamp - a.timestamp) / (b.timestamp - a.timestamp)
    q = quat_slerp(a.pose.q, b.pose.q, alpha)
    t = (1.0 - alpha) * a.pose.t + alpha * b.pose.t
    return Pose(q, t)


def to_global(annotations, trajectory):
    """Transform sensor-frame boxes into the global frame using the pose
    interpolated at each annotation timestamp.

    Returns [(global Box3D, FrameAnnotation), ...]. Box yaw is composed as
    pose yaw + box yaw, which is exact because trajectories of a ground
    platform are gravity aligned (yaw-only rotations).
    """
    out = []
    for ann in annotations:
        pose = interpolate_pose(trajectory, ann.timestamp)
        center = pose.apply(ann.box.center)
        yaw = _wrap_angle(pose.yaw() + ann.box.yaw)
        out.append((Box3D(center, ann.box.dims.copy(), yaw), ann))
    return out


def _wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = float(np.mod(a + np.pi, 2.0 * np.pi) - np.pi)
    return np.pi if a == -np.pi else a


def cluster_instances(boxes, classes, eps, min_pts):
    """DBSCAN on box centers, run independently per semantic class.

    Returns clusters as lists of indices into the inputs, ordered by their
    smallest member index; noise points are dropped.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    if len(boxes) != len(classes):
        raise ValueError("boxes and classes length mismatch")
    clusters = []
    for cls in sorted(set(classes)):
        idx = np.array([i for i, c in enumerate(classes) if c == cls], dtype=np.int64)
        centers = np.ascontiguousarray(
            np.array([boxes[i].center for i in idx], dtype=np.float64).reshape(-1, 3))
        labels = _kernels.dbscan_labels(centers, float(eps), int(min_pts))
        labels = np.asarray(labels)
        for lab in range(labels.max() + 1 if labels.size else 0):
            clusters.append([int(i) for i in idx[labels == lab]])
    clusters.sort(key=lambda c: c[0])
    return clusters


def _circular_median(angles):
    """Member angle minimizing summed circular distance to all members;
    ties broken by smaller |angle|, then by value. Angles in (-pi, pi]."""
    cands = [_wrap_angle(a) for a in angles]
    best = None
    best_key = None
    for c in cands:
        cost = sum(abs(_wrap_angle(c - a)) for a in cands)
        key = (cost, abs(c), c)
        if best_key is None or key < best_key:
            best, best_key = c, key
    return best


def fit_instance_box(cluster):
    """Single box for a cluster: coordinatewise median center and dims,
    circular median yaw."""
    if not cluster:
        raise ValueError("empty cluster")
    centers = np.array([b.center for b in cluster])
    dims = np.array([b.dims for b in cluster])
    yaw = _circular_median([b.yaw for b in cluster])
    return Box3D(np.median(centers, axis=0), np.median(dims, axis=0), yaw)


def build_instances(boxes, classes, clusters):
    """Fit one GlobalInstance per cluster; ids follow the cluster order."""
    out = []
    for k, cluster in enumerate(clusters):
        fitted = fit_instance_box([boxes[i] for i in cluster])
        out.append(GlobalInstance(k, classes[cluster[0]], fitted, len(cluster)))
    return out


def make_obs_id(sequence_id, frame_id, instance_id):
    return f"{sequence_id}:{frame_id:06d}:{instance_id:04d}"


def generate_observations(instances, frames, cam: CameraIntrinsics, range_m,
                          min_points, fov_margin_px=0.0):
    """Project instances into frames, keeping those in range, in the field of
    view, and with enough lidar points inside the 3D box.

    Surviving candidates get bbox2d = conic bbox of the projected inscribed
    ellipsoid, clipped to the image rectangle. Candidates whose projection is
    degenerate (object cut by the principal plane) are skipped with a warning
    rather than failing the pipeline.
    """
    records = []
    for frame in frames:
        for inst in instances:
            center = inst.box.center
            if np.linalg.norm(center - frame.cam_pose.t) > range_m:
                continue
            if not in_fov(center, cam, frame.cam_pose, fov_margin_px):
                continue
            if frame.cloud is not None and points_in_box(frame.cloud, inst.box) < min_points:
                continue
            try:
                conic = project_quadric(
                    dual_quadric_from_ellipsoid(inscribe_ellipsoid(inst.box)),
                    cam, frame.cam_pose)
                bbox = conic_to_bbox(conic)
            except (DegenerateConicError, GeometryError) as exc:
                log.warning("skipping instance %d in %s:%d: %s",
                            inst.instance_id, frame.sequence_id, frame.frame_id, exc)
                continue
            clipped = bbox.clipped(cam.width, cam.height)
            if clipped is None:
                continue
            records.append(ObservationRecord(
                obs_id=make_obs_id(frame.sequence_id, frame.frame_id, inst.instance_id),
                instance_id=inst.instance_id,
                cls=inst.cls,
                sequence_id=frame.sequence_id,
                frame_id=frame.frame_id,
                weather=frame.weather,
                bbox2d=clipped,
                cam_pose=frame.cam_pose,
                object_center=center.copy(),
            ))
    return records


def refine_bbox_to_mask(bbox: BBox2D, mask):
    """Tight bbox of mask pixels inside the given bbox (pixel-extent bounds:
    a set pixel (r, c) spans [c, c+1) x [r, r+1))."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    x0 = max(0, int(np.floor(bbox.x_min)))
    y0 = max(0, int(np.floor(bbox.y_min)))
    x1 = min(w, int(np.ceil(bbox.x_max)))
    y1 = min(h, int(np.ceil(bbox.y_max)))
    if x0 >= x1 or y0 >= y1:
        raise EmptyMaskError("bbox does not intersect the mask raster")
    window = mask[y0:y1, x0:x1]
    rows = np.flatnonzero(window.any(axis=1))
    cols = np.flatnonzero(window.any(axis=0))
    if rows.size == 0:
        raise EmptyMaskError("no mask pixels inside bbox")
    return BBox2D(float(x0 + cols[0]), float(y0 + rows[0]),
                  float(x0 + cols[-1] + 1), float(y0 + rows[-1] + 1))
