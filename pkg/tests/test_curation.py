import math

import numpy as np
import pytest

from objreid.curation import (FrameAnnotation, FrameContext, GlobalInstance,
                              TrajectorySample, cluster_instances,
                              build_instances, fit_instance_box,
                              generate_observations, interpolate_pose,
                              refine_bbox_to_mask, to_global)
from objreid.errors import EmptyMaskError, TrajectoryRangeError
from objreid.geometry import BBox2D, Box3D, CameraIntrinsics, Pose


def ann(ts, center, yaw=0.0, cls="tree", seq="s0", frame=0):
    return FrameAnnotation(seq, frame, ts, cls, Box3D(center, [1, 1, 2], yaw))


def traj_identity(t0=0.0, t1=10.0):
    return [TrajectorySample(t0, Pose.identity()),
            TrajectorySample(t1, Pose.identity())]


# ---------------------------------------------------------------------------
# global lift

def test_to_global_identity():
    out = to_global([ann(1.0, [1, 2, 0.5], 0.3)], traj_identity())
    box = out[0][0]
    assert np.allclose(box.center, [1, 2, 0.5])
    assert abs(box.yaw - 0.3) < 1e-12


def test_to_global_translation():
    traj = [TrajectorySample(0.0, Pose.from_yaw(0, (5, 0, 0))),
            TrajectorySample(10.0, Pose.from_yaw(0, (5, 0, 0)))]
    out = to_global([ann(2.0, [1, 0, 0])], traj)
    assert np.allclose(out[0][0].center, [6, 0, 0])


def test_to_global_slerp_midpoint():
    traj = [TrajectorySample(0.0, Pose.from_yaw(0.0)),
            TrajectorySample(2.0, Pose.from_yaw(math.pi / 2))]
    out = to_global([ann(1.0, [0, 0, 0], 0.0)], traj)
    # quaternion oracle: slerp of yaw quats at t=0.5 is the half-angle quat
    half = 2.0 * math.atan2(math.sin(math.pi / 8), math.cos(math.pi / 8))
    assert abs(out[0][0].yaw - half) < 1e-12
    assert abs(out[0][0].yaw - math.pi / 4) < 1e-12


def test_to_global_out_of_span():
    with pytest.raises(TrajectoryRangeError):
        to_global([ann(11.0, [0, 0, 0])], traj_identity())
    with pytest.raises(TrajectoryRangeError):
        interpolate_pose(traj_identity(), -1.0)


def test_interpolate_exact_sample():
    traj = [TrajectorySample(0.0, Pose.from_yaw(0.1, (1, 0, 0))),
            TrajectorySample(1.0, Pose.from_yaw(0.9, (2, 0, 0)))]
    p = interpolate_pose(traj, 1.0)
    assert np.array_equal(p.t, traj[1].pose.t)


# ---------------------------------------------------------------------------
# clustering

def centers_to_boxes(centers, cls="tree"):
    boxes = [Box3D(c, [1, 1, 1], 0.0) for c in centers]
    return boxes, [cls] * len(boxes)


def test_cluster_near_pair():
    boxes, classes = centers_to_boxes([[0, 0, 0], [0.1, 0, 0]])
    assert cluster_instances(boxes, classes, 0.5, 1) == [[0, 1]]


def test_cluster_far_pair():
    boxes, classes = centers_to_boxes([[0, 0, 0], [10, 0, 0]])
    assert cluster_instances(boxes, classes, 0.5, 1) == [[0], [1]]


def test_cluster_per_class_independent():
    boxes = [Box3D([0, 0, 0], [1, 1, 1], 0), Box3D([0.1, 0, 0], [1, 1, 1], 0)]
    classes = ["tree", "pole"]
    clusters = cluster_instances(boxes, classes, 0.5, 1)
    assert clusters == [[0], [1]]


def naive_dbscan(centers, eps, min_pts):
    """Independent O(n^2) reference: same conventions as the library
    (index-ordered seeds, FIFO growth, noise = -1, canonical relabel)."""
    n = len(centers)
    neigh = []
    for i in range(n):
        row = []
        for j in range(n):
            d = sum((centers[i][k] - centers[j][k]) ** 2 for k in range(3))
            if d <= eps * eps:
                row.append(j)
        neigh.append(row)
    labels = [None] * n
    cluster = 0
    for i in range(n):
        if labels[i] is not None:
            continue
        if len(neigh[i]) < min_pts:
            labels[i] = -1
            continue
        labels[i] = cluster
        queue = [i]
        while queue:
            k = queue.pop(0)
            if len(neigh[k]) < min_pts:
                continue
            for j in neigh[k]:
                if labels[j] == -1:
                    labels[j] = cluster
                elif labels[j] is None:
                    labels[j] = cluster
                    queue.append(j)
        cluster += 1
    firsts = {}
    for i, lab in enumerate(labels):
        if lab >= 0 and lab not in firsts:
            firsts[lab] = i
    remap = {lab: r for r, lab in enumerate(sorted(firsts, key=firsts.get))}
    return [remap[lab] if lab >= 0 else -1 for lab in labels]


def test_cluster_matches_naive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(5):
        centers = rng.uniform(-20, 20, (120, 3))
        boxes, classes = centers_to_boxes(centers)
        clusters = cluster_instances(boxes, classes, 2.0, 3)
        labels = np.full(len(centers), -1)
        for k, cl in enumerate(clusters):
            labels[cl] = k
        assert labels.tolist() == naive_dbscan(centers.tolist(), 2.0, 3)


def test_cluster_permutation_invariance():
    rng = np.random.default_rng(1)
    # well-separated blobs so border assignment is unambiguous
    blob_centers = rng.uniform(-50, 50, (8, 3))
    pts = np.concatenate([bc + rng.uniform(-0.4, 0.4, (6, 3)) for bc in blob_centers])
    boxes, classes = centers_to_boxes(pts)
    base = cluster_instances(boxes, classes, 1.0, 3)
    base_sets = {frozenset(c) for c in base}
    perm = rng.permutation(len(pts))
    p_boxes = [boxes[i] for i in perm]
    permuted = cluster_instances(p_boxes, ["tree"] * len(pts), 1.0, 3)
    permuted_sets = {frozenset(int(perm[i]) for i in c) for c in permuted}
    assert base_sets == permuted_sets


# ---------------------------------------------------------------------------
# box fitting

def test_fit_single_box():
    b = Box3D([1, 2, 3], [2, 2, 2], 0.5)
    f = fit_instance_box([b])
    assert np.allclose(f.center, b.center) and abs(f.yaw - 0.5) < 1e-12


def test_fit_median_robust_to_outlier():
    boxes = [Box3D([x, 0, 0], [1, 1, 1], 0.0) for x in (0.0, 1.0, 100.0)]
    assert fit_instance_box(boxes).center[0] == 1.0


def test_fit_circular_median():
    yaws = [math.radians(a) for a in (-170.0, 180.0, 170.0)]
    boxes = [Box3D([0, 0, 0], [1, 1, 1], y) for y in yaws]
    got = fit_instance_box(boxes).yaw
    # exhaustive scan oracle over the member angles
    def circ_dist(a, b):
        d = math.fmod(a - b + math.pi, 2 * math.pi)
        if d < 0:
            d += 2 * math.pi
        return abs(d - math.pi)
    costs = {y: sum(circ_dist(y, o) for o in yaws) for y in yaws}
    best = min(costs.values())
    assert abs(circ_dist(got, math.pi)) < 1e-12
    assert abs(costs[[y for y in yaws if abs(y - math.pi) < 1e-9][0]] - best) < 1e-12


def test_fit_duplicate_stability():
    boxes = [Box3D([x, 0, 0], [1, 1, 1], 0.0) for x in (0.0, 1.0, 2.0)]
    before = fit_instance_box(boxes)
    after = fit_instance_box(boxes + [Box3D([1.0, 0, 0], [1, 1, 1], 0.0)])
    assert np.allclose(before.center, after.center)


def test_fit_empty():
    with pytest.raises(ValueError):
        fit_instance_box([])


# ---------------------------------------------------------------------------
# observation generation

def make_instances():
    return [GlobalInstance(0, "tree", Box3D([0, 0, 1], [1, 1, 2], 0.0), 3),
            GlobalInstance(1, "pole", Box3D([100, 0, 1], [1, 1, 2], 0.0), 3)]


def camera():
    return CameraIntrinsics(fx=500, fy=500, cx=320, cy=240, width=640, height=480)


def cam_pose_at(x, y, z, look_yaw=0.0):
    # camera z-forward along world +x when look_yaw = 0
    mount = Pose(np.array([0.5, -0.5, 0.5, -0.5]), np.zeros(3))
    return Pose.from_yaw(look_yaw, (x, y, z)).compose(mount)


def frame(cloud=None, seq="s0", fid=0, weather="sunny", pose=None):
    return FrameContext(seq, fid, pose or cam_pose_at(-10, 0, 1), weather, cloud)


def test_range_filter():
    recs = generate_observations(make_instances(), [frame()], camera(), 50.0, 0)
    assert [r.instance_id for r in recs] == [0]  # instance 1 is 110 m away


def test_min_points_filter():
    cloud = np.zeros((0, 3))
    recs = generate_observations(make_instances(), [frame(cloud=cloud)],
                                 camera(), 50.0, 5)
    assert recs == []
    cloud = np.tile([[0.0, 0.0, 1.0]], (5, 1))
    recs = generate_observations(make_instances(), [frame(cloud=cloud)],
                                 camera(), 50.0, 5)
    assert [r.instance_id for r in recs] == [0]


def test_observations_match_brute_force():
    rng = np.random.default_rng(7)
    instances = [GlobalInstance(i, "tree",
                                Box3D(np.append(rng.uniform(-30, 30, 2), 1.0),
                                      [1, 1, 2], 0.0), 3)
                 for i in range(15)]
    cam = camera()

    def make_cloud():
        clutter = np.column_stack([rng.uniform(-30, 30, 300),
                                   rng.uniform(-30, 30, 300),
                                   rng.uniform(0, 2, 300)])
        near = np.concatenate([inst.box.center + rng.uniform(-0.3, 0.3, (3, 3))
                               for inst in rng.choice(instances, 8)])
        return np.vstack([clutter, near])

    frames = [frame(cloud=make_cloud(), fid=k,
                    pose=cam_pose_at(*rng.uniform(-20, 20, 2), 1.0,
                                     look_yaw=rng.uniform(-3, 3)))
              for k in range(10)]
    range_m, min_points = 25.0, 2
    recs = generate_observations(instances, frames, cam, range_m, min_points)
    got = {(r.sequence_id, r.frame_id, r.instance_id) for r in recs}

    from objreid.geometry import (conic_to_bbox, dual_quadric_from_ellipsoid,
                                  in_fov, inscribe_ellipsoid, points_in_box,
                                  project_quadric)
    expected = set()
    for f in frames:
        for inst in instances:
            if np.linalg.norm(inst.box.center - f.cam_pose.t) > range_m:
                continue
            if not in_fov(inst.box.center, cam, f.cam_pose, 0.0):
                continue
            if points_in_box(f.cloud, inst.box) < min_points:
                continue
            try:
                b = conic_to_bbox(project_quadric(
                    dual_quadric_from_ellipsoid(inscribe_ellipsoid(inst.box)),
                    cam, f.cam_pose))
            except Exception:
                continue
            if b.clipped(cam.width, cam.height) is None:
                continue
            expected.add((f.sequence_id, f.frame_id, inst.instance_id))
    assert got == expected
    assert len(recs) > 0


def test_observation_monotonicity():
    rng = np.random.default_rng(8)
    instances = [GlobalInstance(i, "tree",
                                Box3D(np.append(rng.uniform(-20, 20, 2), 1.0),
                                      [1, 1, 2], 0.0), 3)
                 for i in range(10)]
    frames = [frame(cloud=rng.uniform(-20, 20, (300, 3)), fid=k,
                    pose=cam_pose_at(*rng.uniform(-15, 15, 2), 1.0,
                                     look_yaw=rng.uniform(-3, 3)))
              for k in range(6)]
    cam = camera()
    n = [len(generate_observations(instances, frames, cam, 25.0, mp))
         for mp in (0, 2, 5, 20)]
    assert n == sorted(n, reverse=True)
    m = [len(generate_observations(instances, frames, cam, r, 0))
         for r in (10.0, 20.0, 40.0)]
    assert m == sorted(m)


def test_observation_ids_reference_instances():
    instances = make_instances()
    recs = generate_observations(instances, [frame()], camera(), 200.0, 0)
    by_id = {i.instance_id: i for i in instances}
    for r in recs:
        assert r.instance_id in by_id
        assert by_id[r.instance_id].cls == r.cls
        assert r.bbox2d.clipped(camera().width, camera().height) is not None


def test_weather_enum_enforced():
    with pytest.raises(ValueError):
        frame(weather="snowy")


# ---------------------------------------------------------------------------
# mask refinement

def test_refine_full_rectangle():
    mask = np.zeros((100, 100), dtype=bool)
    mask[20:40, 30:60] = True
    out = refine_bbox_to_mask(BBox2D(10, 10, 90, 90), mask)
    assert (out.x_min, out.y_min, out.x_max, out.y_max) == (30, 20, 60, 40)


def test_refine_empty_mask():
    with pytest.raises(EmptyMaskError):
        refine_bbox_to_mask(BBox2D(10, 10, 90, 90), np.zeros((100, 100), dtype=bool))


def test_refine_blob_matches_pixel_scan():
    rng = np.random.default_rng(2)
    mask = rng.random((80, 120)) > 0.97
    bbox = BBox2D(15.3, 8.7, 100.2, 70.9)
    try:
        out = refine_bbox_to_mask(bbox, mask)
    except EmptyMaskError:
        pytest.skip("empty draw")
    xs, ys = [], []
    # pixel-scan oracle over the integer window actually used
    x0, y0 = int(np.floor(15.3)), int(np.floor(8.7))
    x1, y1 = int(np.ceil(100.2)), int(np.ceil(70.9))
    for r in range(y0, y1):
        for c in range(x0, x1):
            if mask[r, c]:
                xs.append(c)
                ys.append(r)
    assert out.x_min == min(xs) and out.x_max == max(xs) + 1
    assert out.y_min == min(ys) and out.y_max == max(ys) + 1


def test_build_instances_support_counts():
    boxes, classes = centers_to_boxes([[0, 0, 0], [0.1, 0, 0], [9, 9, 9]])
    clusters = cluster_instances(boxes, classes, 0.5, 1)
    instances = build_instances(boxes, classes, clusters)
    assert [i.support_count for i in instances] == [2, 1]
    assert [i.instance_id for i in instances] == [0, 1]
