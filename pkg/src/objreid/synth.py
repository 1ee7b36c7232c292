"""Seeded synthetic worlds: instance layouts, planar camera trajectories with
per-frame annotations and point clouds, and feature vectors with controllable
weather / viewpoint confounds and known ground truth.

The generator emits exactly the file formats the real pipeline consumes, so
every downstream command runs unchanged on synthetic data. Camera frames are
produced by composing the (yaw-only) platform pose with a fixed mount that
turns the platform's x-forward axis into the camera's z-forward axis.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .curation import (FrameAnnotation, GlobalInstance, TrajectorySample,
                       WEATHER_LABELS)
from .errors import GeometryError
from .geometry import Box3D, CameraIntrinsics, Pose, in_fov, inscribe_ellipsoid

# platform x-forward -> camera z-forward, x-right, y-down; camera sits 0.5 m up
CAMERA_MOUNT = Pose(np.array([0.5, -0.5, 0.5, -0.5]), np.array([0.2, 0.0, 0.5]))

DEFAULT_CAMERA = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0,
                                  width=640, height=480)

CLASS_DIMS = {
    "tree": (0.9, 0.9, 6.0),
    "pole": (0.4, 0.4, 5.0),
    "bollard": (0.5, 0.5, 1.2),
    "trash_can": (0.8, 0.8, 1.3),
    "sign": (0.6, 0.2, 2.5),
}
_FALLBACK_DIMS = (0.7, 0.7, 2.0)


def derive_seed(*parts):
    """Stable 64-bit seed from arbitrary labels (Python hash() is randomized)."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _unit(rng, dim):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class WorldSpec:
    counts: dict
    area_half: float = 40.0
    spacing: float = 5.0
    seed: int = 0


@dataclass(frozen=True)
class ConditionModel:
    """How weather / viewpoint / noise perturb the ideal per-instance feature."""

    weather_scale: float = 0.3
    viewpoint_scale: float = 0.2
    sigma: float = 0.05
    feature_dim: int = 768

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


@dataclass(frozen=True)
class PathSpec:
    kind: str = "circle"
    radius: float = 25.0
    n_frames: int = 40
    height: float = 0.8
    start_angle: float = 0.0
    start: tuple = (-30.0, 0.0)
    end: tuple = (30.0, 0.0)
    dt: float = 0.5
    t0: float = 0.0


def gen_world(spec: WorldSpec):
    """Instances placed uniformly in the square, rejecting draws closer than
    the minimum spacing (dart throwing with a bounded retry budget)."""
    rng = np.random.default_rng(derive_seed(spec.seed, "world"))
    placed = []
    instances = []
    instance_id = 0
    for cls in sorted(spec.counts):
        base_dims = np.array(CLASS_DIMS.get(cls, _FALLBACK_DIMS))
        for _ in range(spec.counts[cls]):
            for _attempt in range(10000):
                xy = rng.uniform(-spec.area_half, spec.area_half, 2)
                if all(np.hypot(xy[0] - p[0], xy[1] - p[1]) >= spec.spacing for p in placed):
                    break
            else:
                raise GeometryError(
                    f"cannot place {sum(spec.counts.values())} instances with "
                    f"spacing {spec.spacing} in half-size {spec.area_half} area")
            placed.append(xy)
            dims = base_dims * rng.uniform(0.8, 1.2, 3)
            yaw = float(rng.uniform(-math.pi, math.pi))
            center = np.array([xy[0], xy[1], dims[2] / 2.0])
            instances.append(GlobalInstance(instance_id, cls,
                                            Box3D(center, dims, yaw), 1))
            instance_id += 1
    return instances


def _path_pose(path: PathSpec, i):
    if path.kind == "circle":
        theta = path.start_angle + 2.0 * math.pi * i / path.n_frames
        x = path.radius * math.cos(theta)
        y = path.radius * math.sin(theta)
        heading = theta + math.pi / 2.0  # tangent, counter-clockwise
    elif path.kind == "line":
        frac = i / max(1, path.n_frames - 1)
        x = path.start[0] + frac * (path.end[0] - path.start[0])
        y = path.start[1] + frac * (path.end[1] - path.start[1])
        heading = math.atan2(path.end[1] - path.start[1], path.end[0] - path.start[0])
    else:
        raise ValueError(f"unknown path kind {path.kind!r}")
    return Pose.from_yaw(heading, (x, y, path.height))


def gen_sequence(world, cam: CameraIntrinsics, path: PathSpec, weather, seq_id,
                 seed, surface_points=60, clutter_points=120, max_range=60.0):
    """One traversal: trajectory samples, sensor-frame annotations for visible
    instances (the exact inverse of the global lift), and per-frame clouds.

    Clouds are in the sensor frame and contain points sampled on each visible
    instance's inscribed ellipsoid surface plus uniform clutter. Returns
    (samples, annotations, frames) where frames are dicts with frame_id,
    timestamp, weather and the cloud array.
    """
    if weather not in WEATHER_LABELS:
        raise ValueError(f"weather must be one of {WEATHER_LABELS}")
    rng = np.random.default_rng(derive_seed(seed, "seq", seq_id))
    samples = []
    annotations = []
    frames = []
    for i in range(path.n_frames):
        ts = path.t0 + i * path.dt
        base = _path_pose(path, i)
        samples.append(TrajectorySample(ts, base))
        cam_pose = base.compose(CAMERA_MOUNT)
        inv_base = base.inverse()
        cloud_parts = []
        for inst in world:
            center = inst.box.center
            if np.linalg.norm(center - cam_pose.t) > max_range:
                continue
            if not in_fov(center, cam, cam_pose, 0.0):
                continue
            local_center = inv_base.apply(center)
            local_yaw = _wrap(inst.box.yaw - base.yaw())
            annotations.append(FrameAnnotation(
                sequence_id=seq_id, frame_id=i, timestamp=ts, cls=inst.cls,
                box=Box3D(local_center, inst.box.dims.copy(), local_yaw)))
            ell = inscribe_ellipsoid(inst.box)
            dirs = rng.standard_normal((surface_points, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            surf = ell.pose.apply(dirs * ell.semi_axes)
            cloud_parts.append(inv_base.apply(surf))
        clutter = np.column_stack([
            rng.uniform(-30.0, 30.0, clutter_points),
            rng.uniform(-30.0, 30.0, clutter_points),
            rng.uniform(0.0, 3.0, clutter_points),
        ])
        cloud_parts.append(clutter)
        frames.append({"frame_id": i, "timestamp": ts, "weather": weather,
                       "cloud": np.vstack(cloud_parts)})
    return samples, annotations, frames


def _wrap(a):
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a < 0:
        a += 2.0 * math.pi
    return a - math.pi


def gen_feature(instance_id, object_center, cam_pose: Pose, weather,
                cond: ConditionModel, world_seed, obs_seed):
    """Representation for one observation: a per-instance base direction
    (near-orthogonal across instances at dim 768) plus a shared per-weather
    shift, a smooth viewpoint perturbation of the camera ray, and isotropic
    noise. With all condition scales zero the feature is the instance base."""
    dim = cond.feature_dim
    h = _unit(np.random.default_rng(derive_seed(world_seed, "base", instance_id)), dim)
    if cond.weather_scale != 0.0:
        shift = _unit(np.random.default_rng(derive_seed(world_seed, "weather", weather)), dim)
        h = h + cond.weather_scale * shift
    if cond.viewpoint_scale != 0.0:
        ray = np.asarray(cam_pose.t, dtype=np.float64) - np.asarray(object_center)
        n = np.linalg.norm(ray)
        if n == 0.0:
            raise GeometryError("camera coincides with the object")
        proj = np.random.default_rng(derive_seed(world_seed, "viewproj")) \
            .standard_normal((3, dim))
        v = (ray / n) @ proj
        h = h + cond.viewpoint_scale * (v / np.linalg.norm(v))
    if cond.sigma > 0.0:
        h = h + cond.sigma * np.random.default_rng(obs_seed).standard_normal(dim)
    return h


def match_to_ground_truth(instances, world):
    """Map curated instance ids to ground-truth ids by nearest center (must be
    unambiguous: within half the minimum ground-truth spacing)."""
    gt_centers = np.array([g.box.center for g in world])
    mapping = {}
    for inst in instances:
        d = np.linalg.norm(gt_centers - inst.box.center, axis=1)
        j = int(np.argmin(d))
        mapping[inst.instance_id] = world[j].instance_id
    return mapping


def features_for_observations(observations, instances, world, cond: ConditionModel,
                              seed):
    """Feature matrix aligned with the observation list, generated from the
    ground-truth identity of each curated instance."""
    gt_by_id = {g.instance_id: g for g in world}
    mapping = match_to_ground_truth(instances, world)
    rows = np.empty((len(observations), cond.feature_dim), dtype=np.float64)
    obs_ids = []
    for i, obs in enumerate(observations):
        gt = gt_by_id[mapping[obs.instance_id]]
        rows[i] = gen_feature(gt.instance_id, gt.box.center, obs.cam_pose,
                              obs.weather, cond, seed,
                              derive_seed(seed, "obs", obs.obs_id))
        obs_ids.append(obs.obs_id)
    return rows, obs_ids
