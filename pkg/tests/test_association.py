import numpy as np
import pytest

from mvrecon import synth
from mvrecon.association import (ClassScalePrior, LineSegmentObservation,
                                 associate_detections, dp_means_cluster,
                                 lift_bbox3, lstsq_center,
                                 segment_from_detection)
from mvrecon.errors import (DegeneratePrior, InsufficientViews, UnknownClass)
from mvrecon.geometry import (BBox2, LineSegment, PinholeCamera,
                              SimilarityTransform)
from mvrecon.pruning import Detection


def make_det(bbox, frame_id=0, index=0):
    mask = np.ones((240, 320), dtype=bool)
    return Detection(frame_id=frame_id, bbox=bbox, mask=mask, index=index)


def obs(origin, direction, t_min, t_max, ref=(0, 0)):
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    return LineSegmentObservation(
        LineSegment(np.asarray(origin, float), d, t_min, t_max), ref)


def test_segment_depth_bounds_follow_prior():
    cam = PinholeCamera(100, 100, 159.5, 119.5, 320, 240,
                        SimilarityTransform.identity())
    det = make_det(BBox2(110, 70, 210, 170))
    seg = segment_from_detection(det, cam, ClassScalePrior(0, 0.5, 2.0)).segment
    assert seg.t_min == pytest.approx(0.5)
    assert seg.t_max == pytest.approx(2.0)


def test_prior_validation():
    with pytest.raises(DegeneratePrior):
        ClassScalePrior(0, 0.0, 2.0)
    with pytest.raises(DegeneratePrior):
        ClassScalePrior(0, 2.0, 0.5)
    cam = PinholeCamera(100, 100, 159.5, 119.5, 320, 240,
                        SimilarityTransform.identity())
    with pytest.raises(UnknownClass):
        segment_from_detection(make_det(BBox2(0, 0, 50, 50)), cam, None)


# ---------------------------------------------------------------- lstsq


def test_lstsq_center_two_perpendicular_segments():
    p = np.array([0.3, -0.2, 1.1])
    segs = [obs(p - np.array([1, 0, 0]), [1, 0, 0], 0, 2).segment,
            obs(p - np.array([0, 1, 0]), [0, 1, 0], 0, 2).segment]
    assert np.allclose(lstsq_center(segs), p, atol=1e-9)


def test_lstsq_center_three_concurrent_lines():
    q = np.array([1.0, 2.0, 3.0])
    rng = np.random.default_rng(0)
    segs = []
    for _ in range(3):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        segs.append(LineSegment(q - 1.2 * d, d, 0.0, 3.0))
    assert np.allclose(lstsq_center(segs), q, atol=1e-9)


def test_lstsq_center_parallel_falls_back_to_midpoint_mean():
    # close enough together that the stability clamp stays inactive
    segs = [LineSegment(np.array([0.0, 0, 0]), np.array([0.0, 0, 1]), 0, 2),
            LineSegment(np.array([0.3, 0, 0]), np.array([0.0, 0, 1]), 0, 2)]
    mids = np.stack([s.midpoint for s in segs])
    assert np.allclose(lstsq_center(segs), mids.mean(axis=0))


# ---------------------------------------------------------------- dp-means


def test_crossing_segments_form_one_cluster_at_origin():
    o = [obs([-1, 0, 0], [1, 0, 0], 0, 2, ref=(0, 0)),
         obs([0, -1, 0], [0, 1, 0], 0, 2, ref=(1, 0))]
    state = dp_means_cluster(o, penalty=0.4)
    assert len(state.centers) == 1
    assert np.linalg.norm(state.centers[0]) < 1e-6
    assert list(state.assignments) == [0, 0]


def bundle(center, n, rng, ref_base, noise=0.01):
    out = []
    for i in range(n):
        origin = center + rng.normal(size=3) * 2.0
        origin += (origin - center) / np.linalg.norm(origin - center)
        d = center - origin
        dist = np.linalg.norm(d)
        d = d / dist + rng.normal(size=3) * noise
        d /= np.linalg.norm(d)
        out.append(obs(origin, d, dist * 0.8, dist * 1.2,
                       ref=(ref_base + i, 0)))
    return out


def test_two_bundles_yield_two_tight_clusters():
    rng = np.random.default_rng(4)
    a = np.zeros(3)
    b = np.array([2.0, 0.4, -0.3])
    o = bundle(a, 10, rng, 0) + bundle(b, 10, rng, 100)
    state = dp_means_cluster(o, penalty=0.4)
    assert len(state.centers) == 2
    got = sorted(state.centers, key=lambda c: c[0])
    assert np.linalg.norm(got[0] - a) < 0.05
    assert np.linalg.norm(got[1] - b) < 0.05
    assert state.converged


def test_single_observation_centers_on_midpoint():
    o = [obs([0, 0, 0], [0, 0, 1], 1.0, 3.0)]
    state = dp_means_cluster(o, penalty=0.4)
    assert len(state.centers) == 1
    assert np.allclose(state.centers[0], [0, 0, 2.0])


def test_objective_trace_never_increases():
    rng = np.random.default_rng(11)
    for trial in range(20):
        centers = rng.normal(size=(3, 3)) * 2
        o = []
        for k, c in enumerate(centers):
            o += bundle(c, 6, rng, 1000 * k + trial, noise=0.05)
        state = dp_means_cluster(o, penalty=0.6)
        tr = np.asarray(state.objective_trace)
        assert np.all(np.diff(tr) <= 1e-9)


def test_dp_means_is_deterministic():
    rng = np.random.default_rng(5)
    o = bundle(np.zeros(3), 8, rng, 0) + bundle(np.array([1.5, 0, 0]), 8,
                                                rng, 50)
    s1 = dp_means_cluster(o, penalty=0.4)
    s2 = dp_means_cluster(o, penalty=0.4)
    assert np.array_equal(np.stack(s1.centers), np.stack(s2.centers))
    assert list(s1.assignments) == list(s2.assignments)


def test_cluster_count_bounds_and_membership():
    rng = np.random.default_rng(6)
    o = bundle(np.zeros(3), 12, rng, 0, noise=0.3)
    state = dp_means_cluster(o, penalty=0.5)
    k = len(state.centers)
    assert 1 <= k <= len(o)
    assert all(0 <= a < k for a in state.assignments)


def test_dp_means_rejects_bad_input():
    with pytest.raises(ValueError):
        dp_means_cluster([], penalty=0.4)
    o = [obs([0, 0, 0], [0, 0, 1], 0, 2)]
    with pytest.raises(ValueError):
        dp_means_cluster(o, penalty=0.0)


# ---------------------------------------------------------------- lifting


def ring_views(n, radius, diameter, fx=120.0):
    """Cameras on a ring plus box detections consistent with an object of
    the given diameter sitting at the origin."""
    cams, dets = {}, {}
    for i in range(n):
        ang = 2 * np.pi * i / n
        pos = np.array([radius * np.cos(ang), 0.4, radius * np.sin(ang)])
        cam = synth.look_at_camera(pos, np.zeros(3), fx, fx, 159.5, 119.5,
                                   320, 240)
        depth = cam.world_to_cam(np.zeros((1, 3)))[0, 2]
        w = fx * diameter / depth
        bbox = BBox2(159.5 - w / 2, 119.5 - w / 2,
                     159.5 + w / 2, 119.5 + w / 2)
        cams[i] = cam
        dets[(i, 0)] = make_det(bbox, frame_id=i)
    return cams, dets


def test_lift_recovers_diameter_from_ten_views():
    cams, dets = ring_views(10, 3.0, 1.0)
    members = [obs(cams[i].center, -cams[i].center / 3.0, 2.0, 4.0,
                   ref=(i, 0)) for i in range(10)]
    bb3 = lift_bbox3(np.zeros(3), members, dets, cams,
                     ClassScalePrior(0, 0.2, 4.0))
    assert np.allclose(bb3.half_extents, 0.5, rtol=0.05)


def test_lift_requires_two_frames():
    cams, dets = ring_views(2, 3.0, 1.0)
    members = [obs(cams[0].center, -cams[0].center / 3.0, 2.0, 4.0,
                   ref=(0, 0))]
    with pytest.raises(InsufficientViews):
        lift_bbox3(np.zeros(3), members, dets, cams,
                   ClassScalePrior(0, 0.2, 4.0))


def test_lift_median_shrugs_off_one_outlier():
    cams, dets = ring_views(10, 3.0, 1.0)
    big = dets[(3, 0)].bbox
    w = big.width * 2.2
    dets[(3, 0)] = make_det(BBox2(159.5 - w / 2, 119.5 - w / 2,
                                  159.5 + w / 2, 119.5 + w / 2), frame_id=3)
    members = [obs(cams[i].center, -cams[i].center / 3.0, 2.0, 4.0,
                   ref=(i, 0)) for i in range(10)]
    bb3 = lift_bbox3(np.zeros(3), members, dets, cams,
                     ClassScalePrior(0, 0.2, 4.0))
    assert 0.5 <= bb3.half_extents[0] <= 0.55


def test_associate_detections_end_to_end_two_objects():
    centers = [np.array([-0.8, 0.0, 0.0]), np.array([0.9, 0.1, 0.2])]
    cams, dets = {}, []
    fx = 120.0
    for i in range(8):
        ang = 2 * np.pi * i / 8
        pos = np.array([3.0 * np.cos(ang), 0.5, 3.0 * np.sin(ang)])
        cams[i] = synth.look_at_camera(pos, np.zeros(3), fx, fx, 159.5,
                                       119.5, 320, 240)
        for j, c in enumerate(centers):
            uv, depth = cams[i].project(c[None])
            w = fx * 0.8 / depth[0]
            bbox = BBox2(uv[0, 0] - w / 2, uv[0, 1] - w / 2,
                         uv[0, 0] + w / 2, uv[0, 1] + w / 2)
            dets.append(make_det(bbox, frame_id=i, index=j))
    # prior brackets the true 0.8 diameter so segment midpoints land on
    # the objects themselves
    hyps, state, _ = associate_detections(
        dets, cams, {0: ClassScalePrior(0, 0.6, 1.0)}, penalty=0.4)
    assert len(hyps) == 2
    found = sorted([h.center for h in hyps], key=lambda c: c[0])
    assert np.linalg.norm(found[0] - centers[0]) < 0.1
    assert np.linalg.norm(found[1] - centers[1]) < 0.1
    for h in hyps:
        assert h.bbox3 is not None
        assert len(h.members) == 8
