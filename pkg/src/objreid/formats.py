"""Readers and writers for the dataset interchange files.

  - trajectory: text, one `timestamp tx ty tz qx qy qz qw` line (TUM order;
    note the internal quaternion convention is (w, x, y, z))
  - annotations: JSON Lines of frame annotations
  - frames: JSON Lines of per-frame metadata (timestamp, weather, cloud file)
  - instances: JSON array
  - observations: JSON Lines; poses serialized as {"q": [w,x,y,z], "t": [x,y,z]}
  - images / masks: 8-bit PNG

Writers emit canonical JSON (sorted keys, repr floats) so identical inputs
produce byte-identical outputs.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np
from PIL import Image

from .curation import (WEATHER_LABELS, FrameAnnotation, GlobalInstance,
                       ObservationRecord, TrajectorySample)
from .errors import DataError
from .geometry import BBox2D, Box3D, CameraIntrinsics, Pose


def dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def pose_to_json(pose: Pose):
    return {"q": [float(v) for v in pose.q], "t": [float(v) for v in pose.t]}


def pose_from_json(obj):
    return Pose(np.asarray(obj["q"], dtype=np.float64),
                np.asarray(obj["t"], dtype=np.float64))


def box_to_json(box: Box3D):
    return {"center": [float(v) for v in box.center],
            "dims": [float(v) for v in box.dims], "yaw": float(box.yaw)}


def box_from_json(obj):
    return Box3D(np.asarray(obj["center"], dtype=np.float64),
                 np.asarray(obj["dims"], dtype=np.float64), float(obj["yaw"]))


# ---------------------------------------------------------------------------
# trajectories

def load_trajectory(path):
    samples = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DataError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                ts, tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            samples.append(TrajectorySample(ts, Pose(np.array([qw, qx, qy, qz]),
                                                     np.array([tx, ty, tz]))))
    for a, b in zip(samples, samples[1:]):
        if b.timestamp <= a.timestamp:
            raise DataError(f"{path}: timestamps must be strictly increasing")
    return samples


def save_trajectory(path, samples):
    with open(path, "w") as f:
        for s in samples:
            qw, qx, qy, qz = (repr(float(v)) for v in s.pose.q)
            tx, ty, tz = (repr(float(v)) for v in s.pose.t)
            f.write(f"{repr(float(s.timestamp))} {tx} {ty} {tz} {qx} {qy} {qz} {qw}\n")


# ---------------------------------------------------------------------------
# annotations / frames metadata

def load_annotations(path):
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(FrameAnnotation(
                    sequence_id=rec["sequence_id"], frame_id=int(rec["frame_id"]),
                    timestamp=float(rec["timestamp"]), cls=rec["class"],
                    box=box_from_json(rec["box"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad annotation ({exc})") from None
    return out


def save_annotations(path, annotations):
    with open(path, "w") as f:
        for a in annotations:
            f.write(dumps({"sequence_id": a.sequence_id, "frame_id": a.frame_id,
                           "timestamp": a.timestamp, "class": a.cls,
                           "box": box_to_json(a.box)}) + "\n")


def load_frames_meta(path):
    """Frame metadata rows: frame_id, timestamp, weather, optional cloud file
    (relative to the metadata file's directory)."""
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if rec["weather"] not in WEATHER_LABELS:
                    raise ValueError(f"weather must be one of {WEATHER_LABELS}")
                cloud = rec.get("cloud")
                out.append({"frame_id": int(rec["frame_id"]),
                            "timestamp": float(rec["timestamp"]),
                            "weather": rec["weather"],
                            "cloud_path": os.path.join(base, cloud) if cloud else None})
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad frame row ({exc})") from None
    return out


def save_frames_meta(path, frames):
    """frames: dicts with frame_id, timestamp, weather, optional cloud (relative path)."""
    with open(path, "w") as f:
        for fr in frames:
            rec = {"frame_id": fr["frame_id"], "timestamp": fr["timestamp"],
                   "weather": fr["weather"]}
            if fr.get("cloud"):
                rec["cloud"] = fr["cloud"]
            f.write(dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# instances / observations

def save_instances(path, instances):
    rows = [{"instance_id": g.instance_id, "class": g.cls,
             "box": box_to_json(g.box), "support_count": g.support_count}
            for g in instances]
    with open(path, "w") as f:
        f.write(json.dumps(rows, sort_keys=True, indent=1) + "\n")


def load_instances(path):
    try:
        with open(path) as f:
            rows = json.load(f)
        return [GlobalInstance(int(r["instance_id"]), r["class"],
                               box_from_json(r["box"]), int(r["support_count"]))
                for r in rows]
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: bad instances file ({exc})") from None


def save_observations(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(dumps({
                "obs_id": r.obs_id, "instance_id": r.instance_id, "class": r.cls,
                "sequence_id": r.sequence_id, "frame_id": r.frame_id,
                "weather": r.weather,
                "bbox2d": {"x_min": r.bbox2d.x_min, "y_min": r.bbox2d.y_min,
                           "x_max": r.bbox2d.x_max, "y_max": r.bbox2d.y_max},
                "cam_pose": pose_to_json(r.cam_pose),
                "object_center": [float(v) for v in r.object_center],
            }) + "\n")


def load_observations(path):
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                bb = rec["bbox2d"]
                out.append(ObservationRecord(
                    obs_id=rec["obs_id"], instance_id=int(rec["instance_id"]),
                    cls=rec["class"], sequence_id=rec["sequence_id"],
                    frame_id=int(rec["frame_id"]), weather=rec["weather"],
                    bbox2d=BBox2D(bb["x_min"], bb["y_min"], bb["x_max"], bb["y_max"]),
                    cam_pose=pose_from_json(rec["cam_pose"]),
                    object_center=np.asarray(rec["object_center"], dtype=np.float64)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad observation ({exc})") from None
    return out


# ---------------------------------------------------------------------------
# camera description

def save_camera(path, cam: CameraIntrinsics, mount: Pose):
    with open(path, "w") as f:
        f.write(dumps({"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                       "width": cam.width, "height": cam.height,
                       "mount": pose_to_json(mount)}) + "\n")


def load_camera(path):
    try:
        with open(path) as f:
            rec = json.load(f)
        cam = CameraIntrinsics(rec["fx"], rec["fy"], rec["cx"], rec["cy"],
                               rec["width"], rec["height"])
        return cam, pose_from_json(rec["mount"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: bad camera file ({exc})") from None


# ---------------------------------------------------------------------------
# rasters

def load_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_image(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path, format="PNG")


def load_mask(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def load_cloud(path):
    return np.load(path).astype(np.float64)


def save_cloud(path, points):
    np.save(path, np.asarray(points, dtype=np.float64))


# ---------------------------------------------------------------------------
# provenance manifest

def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, config_text, input_paths, extra=None):
    """Provenance record: config hash plus content hash per input (keyed by
    basename so the manifest is path independent)."""
    manifest = {
        "command": command,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "inputs": {os.path.basename(p): file_sha256(p) for p in sorted(input_paths)},
    }
    if extra:
        manifest.update(extra)
    with open(path, "w") as f:
        f.write(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
