import numpy as np
import pytest

from voxocc.instances import (
    Candidate,
    RefineParams,
    SizeInterval,
    YawBox,
    build_candidates,
    fit_yaw_box,
    identify_instances,
    iosv,
    merge_boxes,
    reassign_points,
    refine_candidate,
)
from voxocc.lift import LabeledPointCloud


def _rot_z(points, theta):
    c, s = np.cos(theta), np.sin(theta)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return points @ R.T


def _yaw_diff(a, b):
    d = abs(a - b) % np.pi
    return min(d, np.pi - d)


def _box_cluster(rng, n=200, size=(4.0, 2.0, 1.5)):
    # anisotropic uniform cluster: distinct principal variances keep PCA stable
    pts = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.asarray(size)
    return pts


def test_fit_axis_aligned_square():
    xy = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
    pts = np.column_stack([xy, np.zeros(4)])
    # make x clearly the major axis so yaw is well-defined
    pts[:, 0] *= 2.0
    box = fit_yaw_box(pts)
    assert _yaw_diff(box.yaw, 0.0) < 1e-9
    assert box.extents[0] == pytest.approx(2.0)
    assert box.extents[1] == pytest.approx(1.0)


def test_fit_rotated_square_recovers_angle():
    rng = np.random.default_rng(1)
    pts = _box_cluster(rng, 400)
    base = fit_yaw_box(pts)
    theta = np.deg2rad(30.0)
    rot = fit_yaw_box(_rot_z(pts, theta))
    assert _yaw_diff(rot.yaw, base.yaw + theta) < 1e-6
    np.testing.assert_allclose(rot.extents, base.extents, atol=1e-6)


def test_fit_single_point_clamps_extents():
    box = fit_yaw_box(np.array([[1.0, 2.0, 3.0]]))
    assert box.yaw == 0.0
    assert (box.extents >= 1e-3).all()
    np.testing.assert_allclose(box.center, [1.0, 2.0, 3.0])


def test_fit_equivariance_random():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        pts = _box_cluster(rng, int(rng.integers(20, 300)))
        theta = rng.uniform(-np.pi, np.pi)
        base = fit_yaw_box(pts)
        rot = fit_yaw_box(_rot_z(pts, theta))
        assert _yaw_diff(rot.yaw, base.yaw + theta) < 1e-6
        np.testing.assert_allclose(rot.extents, base.extents, atol=1e-6)


# --- robust refinement ----------------------------------------------------------

def _candidate(xyz, class_id=4, depth=None, cam=None):
    n = len(xyz)
    return Candidate(
        class_id, 1, np.asarray(xyz, float),
        np.asarray(depth if depth is not None else np.full(n, 10.0), float),
        np.asarray(cam if cam is not None else np.zeros(n), np.uint8),
        np.arange(n),
    )


CAR_INTERVAL = SizeInterval(4, (6.0, 2.5, 2.5))
PED_INTERVAL = SizeInterval(7, (1.2, 1.2, 2.2))


def test_refine_accepts_compact_car_unchanged():
    rng = np.random.default_rng(3)
    pts = _box_cluster(rng, 300, size=(4.5, 1.9, 1.6)) + [10.0, 0.0, 0.8]
    cand = _candidate(pts)
    result = refine_candidate(cand, CAR_INTERVAL, RefineParams())
    assert result is not None
    kept, box = result
    assert len(kept) == 300  # uniform cluster: nothing to prune
    assert CAR_INTERVAL.plausible(box.extents)


def test_refine_removes_depth_bleed_outliers():
    rng = np.random.default_rng(4)
    n_good, n_bad = 285, 15  # ~5% bleed
    good = _box_cluster(rng, n_good, size=(4.2, 1.8, 1.5)) + [8.0, 0.0, 0.8]
    depth_good = np.linalg.norm(good[:, :2], axis=1)
    bad = good[:n_bad] * [2.0, 2.0, 1.0]  # projected through at twice the depth
    depth_bad = depth_good[:n_bad] * 2.0
    cand = _candidate(
        np.concatenate([good, bad]),
        depth=np.concatenate([depth_good, depth_bad]),
    )
    result = refine_candidate(cand, CAR_INTERVAL, RefineParams())
    assert result is not None
    kept, box = result
    assert set(kept) & set(range(n_good, n_good + n_bad)) == set()  # all bleed points gone
    assert CAR_INTERVAL.plausible(box.extents)


def test_refine_rejects_5m_pedestrian():
    rng = np.random.default_rng(5)
    pts = _box_cluster(rng, 200, size=(5.0, 5.0, 1.8))
    assert refine_candidate(_candidate(pts, class_id=7), PED_INTERVAL, RefineParams()) is None


def test_refine_rejects_too_few_points():
    pts = np.zeros((3, 3))
    assert refine_candidate(_candidate(pts), CAR_INTERVAL, RefineParams()) is None


def test_refine_volume_never_increases():
    rng = np.random.default_rng(6)
    params = RefineParams()
    for _ in range(20):
        pts = _box_cluster(rng, 150, size=(7.0, 2.0, 1.5))  # too long: forces tightening
        pts += rng.normal(scale=1.0, size=pts.shape) * [2.0, 0.1, 0.1]
        cand = _candidate(pts)
        volumes = []
        keep = np.arange(len(pts))
        factor, k = params.iqr_factor, params.mad_k
        from voxocc.instances import _iqr_keep, _mad_keep
        for _pass in range(params.max_passes):
            if len(keep) < params.min_points:
                break
            keep = keep[_iqr_keep(cand.depth[keep], cand.cam[keep], factor)]
            if len(keep) < params.min_points:
                break
            keep = keep[_mad_keep(cand.xyz[keep], k)]
            if len(keep) < params.min_points:
                break
            volumes.append(fit_yaw_box(cand.xyz[keep]).volume)
            factor *= params.tighten
            k *= params.tighten
        assert all(b <= a + 1e-9 for a, b in zip(volumes, volumes[1:]))


# --- IoSV -----------------------------------------------------------------------

def _box(center, yaw, extents, class_id=4, instance_id=0):
    return YawBox(np.asarray(center, float), yaw, np.asarray(extents, float),
                  class_id, instance_id)


def test_iosv_identity_disjoint_contained():
    a = _box((0, 0, 0), 0.3, (4, 2, 1.5))
    assert iosv(a, a) == pytest.approx(1.0)
    b = _box((100, 0, 0), 0.0, (4, 2, 1.5))
    assert iosv(a, b) == 0.0
    small = _box((0.2, 0.1, 0.0), 0.3, (1.0, 0.5, 0.5))
    assert iosv(a, small) == pytest.approx(1.0)
    assert iosv(small, a) == pytest.approx(1.0)  # symmetric in the smaller-volume sense


def test_iosv_zero_volume_box():
    a = _box((0, 0, 0), 0.0, (4, 2, 1.5))
    b = YawBox(np.zeros(3), 0.0, np.array([0.0, 1.0, 1.0]))
    assert iosv(a, b) == 0.0


def test_iosv_no_z_overlap():
    a = _box((0, 0, 0), 0.0, (2, 2, 1))
    b = _box((0, 0, 5), 0.0, (2, 2, 1))
    assert iosv(a, b) == 0.0


def test_iosv_monte_carlo_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a = _box(rng.uniform(-1, 1, 3), rng.uniform(-np.pi, np.pi), rng.uniform(0.5, 3, 3))
        b = _box(rng.uniform(-1, 1, 3), rng.uniform(-np.pi, np.pi), rng.uniform(0.5, 3, 3))
        # sample inside the smaller box, count how many fall inside the other
        small, other = (a, b) if a.volume <= b.volume else (b, a)
        n = 60_000
        u = rng.uniform(-0.5, 0.5, (n, 3)) * small.extents
        c, s = np.cos(small.yaw), np.sin(small.yaw)
        pts = np.column_stack([
            c * u[:, 0] - s * u[:, 1] + small.center[0],
            s * u[:, 0] + c * u[:, 1] + small.center[1],
            u[:, 2] + small.center[2],
        ])
        co, so = np.cos(-other.yaw), np.sin(-other.yaw)
        d = pts - other.center
        local = np.column_stack([co * d[:, 0] - so * d[:, 1],
                                 so * d[:, 0] + co * d[:, 1], d[:, 2]])
        frac = ((np.abs(local) <= other.extents / 2).all(axis=1)).mean()
        assert iosv(a, b) == pytest.approx(frac, abs=0.01)


# --- merging and reassignment -----------------------------------------------------

def _accepted(cand, interval=CAR_INTERVAL, params=None):
    result = refine_candidate(cand, interval, params or RefineParams())
    assert result is not None
    return (cand, result[0], result[1])


def test_merge_two_views_of_one_car(taxonomy):
    rng = np.random.default_rng(8)
    base = _box_cluster(rng, 200, size=(4.2, 1.8, 1.5)) + [5.0, 3.0, 0.75]
    shift = base + [0.15, -0.1, 0.0]  # slight cross-camera misalignment
    c1 = _candidate(base)
    c2 = Candidate(4, 2, shift, np.full(len(shift), 8.0), np.ones(len(shift), np.uint8),
                   np.arange(len(shift)) + 1000)
    intervals = {4: CAR_INTERVAL}
    boxes = merge_boxes([_accepted(c1), _accepted(c2)], 0.45, intervals, RefineParams())
    assert len(boxes) == 1
    assert boxes[0].instance_id == 1
    assert boxes[0].support == 400


def test_merge_keeps_separate_cars(taxonomy):
    rng = np.random.default_rng(9)
    a = _candidate(_box_cluster(rng, 150, size=(4.0, 1.8, 1.5)) + [5.0, 0.0, 0.75])
    b_pts = _box_cluster(rng, 150, size=(4.0, 1.8, 1.5)) + [5.0, 8.0, 0.75]
    b = Candidate(4, 2, b_pts, np.full(150, 9.0), np.zeros(150, np.uint8), np.arange(150) + 500)
    intervals = {4: CAR_INTERVAL}
    boxes = merge_boxes([_accepted(a), _accepted(b)], 0.45, intervals, RefineParams())
    assert len(boxes) == 2
    assert sorted(b.instance_id for b in boxes) == [1, 2]


def test_merge_never_crosses_classes(taxonomy):
    rng = np.random.default_rng(10)
    pts = _box_cluster(rng, 150, size=(4.0, 1.8, 1.5)) + [5.0, 0.0, 0.75]
    car = _candidate(pts, class_id=4)
    truck = Candidate(10, 2, pts + 0.05, np.full(150, 9.0), np.zeros(150, np.uint8),
                      np.arange(150) + 500)
    intervals = {4: CAR_INTERVAL, 10: SizeInterval(10, (14.0, 3.2, 4.5))}
    boxes = merge_boxes(
        [_accepted(car), _accepted(truck, intervals[10])], 0.45, intervals, RefineParams()
    )
    assert len(boxes) == 2  # IoSV ~1 but classes differ


def test_merge_output_pairwise_below_threshold(taxonomy):
    rng = np.random.default_rng(11)
    accepted = []
    for i in range(5):
        center = [5.0 + 2.5 * i, 0.0, 0.75]
        pts = _box_cluster(rng, 120, size=(4.0, 1.8, 1.5)) + center
        cand = Candidate(4, i + 1, pts, np.full(120, 9.0), np.zeros(120, np.uint8),
                         np.arange(120) + 1000 * i)
        accepted.append(_accepted(cand))
    boxes = merge_boxes(accepted, 0.45, {4: CAR_INTERVAL}, RefineParams())
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if boxes[i].class_id == boxes[j].class_id:
                assert iosv(boxes[i], boxes[j]) < 0.45


def _cloud(xyz, sem, inst, t=1):
    n = len(xyz)
    return LabeledPointCloud(
        np.asarray(xyz, float), np.asarray(sem, np.uint16), np.asarray(inst, np.int64),
        np.ones(n, np.float32), np.full(n, t, np.uint16), np.zeros(n, np.uint8),
        np.full(n, 10.0, np.float32),
    )


def test_reassign_containment_nearest_ignore(taxonomy):
    box = _box((0, 0, 1.0), 0.0, (4.0, 2.0, 2.0), class_id=4, instance_id=3)
    xyz = [
        [0.0, 0.0, 1.0],   # inside -> id 3
        [3.5, 0.0, 1.0],   # 1.5 m from the +x face -> id 3 via nearest
        [7.0, 0.0, 1.0],   # 5 m away -> ignore
    ]
    cloud = _cloud(xyz, [4, 4, 4], [11, 12, 13])
    out = reassign_points(cloud, [box], 2.0, taxonomy)
    assert out.inst.tolist() == [3, 3, 0]
    assert out.sem.tolist() == [4, 4, taxonomy.ignore_id]


def test_reassign_containment_is_class_agnostic_but_nearest_is_not(taxonomy):
    box = _box((0, 0, 1.0), 0.0, (4.0, 2.0, 2.0), class_id=4, instance_id=1)
    # truck-labeled point inside a car box is captured and relabeled
    inside = _cloud([[0.1, 0.2, 1.0]], [10], [44])
    out = reassign_points(inside, [box], 2.0, taxonomy)
    assert out.sem[0] == 4 and out.inst[0] == 1
    # truck-labeled point near (but outside) a car box is not adopted
    near = _cloud([[3.0, 0.0, 1.0]], [10], [44])
    out2 = reassign_points(near, [box], 2.0, taxonomy)
    assert out2.sem[0] == taxonomy.ignore_id and out2.inst[0] == 0


def test_reassign_ties_break_by_nearest_center(taxonomy):
    b1 = _box((-1.0, 0, 1.0), 0.0, (4.0, 2.0, 2.0), class_id=4, instance_id=1)
    b2 = _box((2.0, 0, 1.0), 0.0, (4.0, 2.0, 2.0), class_id=4, instance_id=2)
    pt = _cloud([[0.9, 0.0, 1.0]], [4], [5])  # inside both, nearer to b2's center
    out = reassign_points(pt, [b1, b2], 2.0, taxonomy)
    assert out.inst[0] == 2


def test_reassign_gives_stuff_canonical_ids(taxonomy):
    from voxocc.taxonomy import stuff_instance_id
    road = taxonomy.name_to_id["driveable_surface"]
    cloud = _cloud([[1.0, 1.0, 0.0]], [road], [0])
    out = reassign_points(cloud, [], 2.0, taxonomy)
    assert out.inst[0] == stuff_instance_id(road)


def test_reassign_no_stale_prior_ids(taxonomy):
    rng = np.random.default_rng(12)
    box = _box((0, 0, 1.0), 0.2, (4.0, 2.0, 2.0), class_id=4, instance_id=1)
    xyz = rng.uniform(-8, 8, size=(200, 3))
    cloud = _cloud(xyz, np.full(200, 4), rng.integers(100, 200, 200))
    out = reassign_points(cloud, [box], 2.0, taxonomy)
    thing = np.isin(out.sem, list(taxonomy.thing_ids))
    assert set(np.unique(out.inst[thing])) <= {1}
    dropped = out.sem == taxonomy.ignore_id
    assert (out.inst[dropped] == 0).all()


def test_identify_instances_end_to_end(taxonomy):
    # one car seen by two cameras as two prior clusters, plus a rejected blob
    rng = np.random.default_rng(13)
    car_pts = _box_cluster(rng, 250, size=(4.2, 1.8, 1.5)) + [6.0, 1.0, 0.75]
    spread = rng.uniform(-3, 3, size=(60, 3)) + [0.0, -8.0, 1.0]  # implausible pedestrian
    xyz = np.concatenate([car_pts[:125], car_pts[125:] + 0.1, spread])
    sem = np.concatenate([np.full(250, 4), np.full(60, 7)])
    inst = np.concatenate([np.full(125, 101), np.full(125, 202), np.full(60, 303)])
    depth = np.concatenate([np.full(125, 8.0), np.full(125, 9.0), np.full(60, 5.0)])
    cam = np.concatenate([np.zeros(125), np.ones(125), np.zeros(60)]).astype(np.uint8)
    cloud = LabeledPointCloud(xyz, sem, inst, np.ones(310, np.float32),
                              np.ones(310, np.uint16), cam, depth)
    intervals = {4: CAR_INTERVAL, 7: PED_INTERVAL}
    boxes = identify_instances(cloud, taxonomy, intervals, RefineParams(), 0.45)
    assert len(boxes) == 1
    assert boxes[0].class_id == 4


def test_build_candidates_groups_by_prior(taxonomy):
    cloud = _cloud(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 0]],
        [4, 4, 4, taxonomy.name_to_id["driveable_surface"]],
        [7, 7, 8, 9],
    )
    cands = build_candidates(cloud, taxonomy, min_points=1)
    assert sorted(c.prior_id for c in cands) == [7, 8]  # stuff priors are not candidates
    assert {c.class_id for c in cands} == {4}
