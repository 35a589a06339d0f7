import numpy as np
import pytest

from mvrecon.errors import BehindCamera
from mvrecon.geometry import (BBox2, BBox3, PinholeCamera,
                              SimilarityTransform, center_ray, iou_2d,
                              point_segment_distance, project_bbox3,
                              LineSegment, quat_from_axis_angle)


def default_cam(f=100.0, w=200, h=200, pose=None):
    return PinholeCamera(f, f, w / 2.0 - 0.5, h / 2.0 - 0.5, w, h,
                         pose or SimilarityTransform.identity())


# ------------------------------------------------------------------ iou

def test_iou_identical_boxes():
    a = BBox2(0, 0, 1, 1)
    assert iou_2d(a, a) == 1.0


def test_iou_disjoint_boxes():
    assert iou_2d(BBox2(0, 0, 1, 1), BBox2(2, 2, 3, 3)) == 0.0


def test_iou_half_offset_boxes():
    a = BBox2(0, 0, 1, 1)
    b = BBox2(0.5, 0, 1.5, 1)
    assert iou_2d(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_iou_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = rng.uniform(-5, 5, size=(2, 4))
        a = BBox2(min(p[0, 0], p[0, 2]), min(p[0, 1], p[0, 3]),
                  max(p[0, 0], p[0, 2]) + 0.1, max(p[0, 1], p[0, 3]) + 0.1)
        b = BBox2(min(p[1, 0], p[1, 2]), min(p[1, 1], p[1, 3]),
                  max(p[1, 0], p[1, 2]) + 0.1, max(p[1, 1], p[1, 3]) + 0.1)
        assert iou_2d(a, b) == pytest.approx(iou_2d(b, a), abs=1e-14)
        assert 0.0 <= iou_2d(a, b) <= 1.0
        assert iou_2d(a, a) == 1.0


# --------------------------------------------------------- 3D box projection

def test_project_bbox3_matches_corner_oracle():
    cam = default_cam()
    bb = BBox3(np.array([0.0, 0.0, 4.0]), np.full(3, 0.5))
    out = project_bbox3(bb, cam)
    uv, z = cam.project(bb.corners())
    assert np.all(z > 0)
    assert out.x_min == pytest.approx(uv[:, 0].min())
    assert out.x_max == pytest.approx(uv[:, 0].max())
    assert out.y_min == pytest.approx(uv[:, 1].min())
    assert out.y_max == pytest.approx(uv[:, 1].max())
    # on-axis cube: projection is a square centered on the principal point
    assert out.center[0] == pytest.approx(cam.cx)
    assert out.center[1] == pytest.approx(cam.cy)
    assert out.width == pytest.approx(out.height)


def test_project_bbox3_behind_camera():
    cam = default_cam()
    bb = BBox3(np.array([0.0, 0.0, -4.0]), np.full(3, 0.5))
    with pytest.raises(BehindCamera):
        project_bbox3(bb, cam)


def test_project_bbox3_thin_box_positive_area():
    cam = default_cam()
    bb = BBox3(np.array([0.1, -0.2, 5.0]), np.array([0.4, 0.3, 1e-6]))
    out = project_bbox3(bb, cam)
    assert out.area > 0


def test_projected_corners_inside_output_box():
    rng = np.random.default_rng(1)
    cam = default_cam(w=400, h=400)
    for _ in range(25):
        center = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1),
                           rng.uniform(3, 8)])
        he = rng.uniform(0.1, 0.6, size=3)
        q = quat_from_axis_angle(rng.normal(size=3) * 0.5)
        bb = BBox3(center, he, q)
        out = project_bbox3(bb, cam)
        uv, _ = cam.project(bb.corners())
        # containment holds pre-clipping
        assert np.all(uv[:, 0] >= out.x_min - 1e-9) or out.x_min == 0
        assert np.all(uv[:, 0] <= out.x_max + 1e-9) or out.x_max == cam.width
        assert np.all(uv[:, 1] >= out.y_min - 1e-9) or out.y_min == 0
        assert np.all(uv[:, 1] <= out.y_max + 1e-9) or out.y_max == cam.height


# ------------------------------------------------------------- center rays

def test_center_ray_at_principal_point_is_forward():
    cam = default_cam()
    det = BBox2(cam.cx - 10, cam.cy - 5, cam.cx + 10, cam.cy + 5)
    ray = center_ray(det, cam)
    assert np.allclose(ray.direction, [0, 0, 1], atol=1e-12)


def test_center_ray_one_focal_off_axis():
    cam = default_cam()
    det = BBox2(cam.cx + cam.fx - 3, cam.cy - 3,
                cam.cx + cam.fx + 3, cam.cy + 3)
    ray = center_ray(det, cam)
    want = np.array([1.0, 0.0, 1.0]) / np.sqrt(2)
    assert np.allclose(ray.direction, want, atol=1e-12)


def test_center_rays_from_two_views_meet_at_target():
    target = np.array([0.3, -0.2, 2.5])
    views = []
    for pos in ([0, 0, 0], [2.0, 0.5, 0.2]):
        z = target - np.asarray(pos, dtype=float)
        z /= np.linalg.norm(z)
        x = np.cross([0, -1, 0], z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z], axis=1)
        pose = SimilarityTransform.from_rotation_matrix(R, pos, 1.0)
        views.append(default_cam(pose=pose))
    rays = []
    for cam in views:
        uv, _ = cam.project(target[None])
        det = BBox2(uv[0, 0] - 4, uv[0, 1] - 4, uv[0, 0] + 4, uv[0, 1] + 4)
        rays.append(center_ray(det, cam))
    # closest-approach midpoint of the two rays
    r0, r1 = rays
    w0 = r0.origin - r1.origin
    a, b, c = 1.0, float(r0.direction @ r1.direction), 1.0
    d, e = float(r0.direction @ w0), float(r1.direction @ w0)
    denom = a * c - b * b
    t0 = (b * e - c * d) / denom
    t1 = (a * e - b * d) / denom
    p = 0.5 * (r0.point_at(t0) + r1.point_at(t1))
    assert np.linalg.norm(p - target) < 1e-6


# -------------------------------------------------------------- transforms

def random_transform(rng, scale_range=(0.3, 3.0)):
    return SimilarityTransform(
        quat_from_axis_angle(rng.normal(size=3)),
        rng.uniform(-2, 2, size=3),
        rng.uniform(*scale_range))


def test_compose_is_associative():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(40, 3))
    for _ in range(20):
        t1, t2, t3 = (random_transform(rng) for _ in range(3))
        left = t1.compose(t2).compose(t3).apply(pts)
        right = t1.compose(t2.compose(t3)).apply(pts)
        assert np.allclose(left, right, atol=1e-9)


def test_inverse_roundtrip():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(40, 3))
    for _ in range(20):
        t = random_transform(rng)
        assert np.allclose(t.inverse().apply(t.apply(pts)), pts, atol=1e-9)
        assert np.allclose(t.apply(t.inverse().apply(pts)), pts, atol=1e-9)


def test_quaternion_stays_normalized():
    rng = np.random.default_rng(4)
    t = random_transform(rng)
    for _ in range(100):
        t = t.compose(random_transform(rng))
        assert abs(np.linalg.norm(t.rotation) - 1.0) < 1e-9


def test_perturbed_identity_tangent_is_noop():
    rng = np.random.default_rng(5)
    t = random_transform(rng)
    t2 = t.perturbed(np.zeros(7))
    pts = rng.normal(size=(10, 3))
    assert np.allclose(t.apply(pts), t2.apply(pts), atol=1e-12)


def test_perturbed_matches_first_order_motion():
    rng = np.random.default_rng(6)
    t = random_transform(rng)
    pts = rng.normal(size=(12, 3))
    eps = 1e-6
    for k in range(7):
        tau = np.zeros(7)
        tau[k] = eps
        moved = t.perturbed(tau).apply(pts)
        rate = (moved - t.apply(pts)) / eps
        assert np.all(np.isfinite(rate))
        # motion must be O(eps), i.e. rates stay bounded
        assert np.max(np.abs(rate)) < 50


def test_backproject_project_roundtrip():
    rng = np.random.default_rng(7)
    cam = default_cam(pose=random_transform(rng, scale_range=(1.0, 1.0)))
    uv = rng.uniform(10, 180, size=(30, 2))
    dirs = np.stack([cam.backproject(p) for p in uv])
    pts = cam.center + dirs * rng.uniform(1, 6, size=30)[:, None]
    uv2, z = cam.project(pts)
    assert np.all(z > 0)
    assert np.allclose(uv, uv2, atol=1e-9)


# ---------------------------------------------------------------- segments

def test_point_on_segment_distance_zero():
    s = LineSegment(np.zeros(3), np.array([1.0, 0, 0]), -1.0, 1.0)
    assert point_segment_distance(np.array([0.3, 0, 0]), s) == 0.0


def test_point_perpendicular_distance():
    s = LineSegment(np.zeros(3), np.array([1.0, 0, 0]), -1.0, 1.0)
    assert point_segment_distance(np.array([0.0, 1.0, 0]), s) == \
        pytest.approx(1.0)


def test_point_past_endpoint_clamps():
    s = LineSegment(np.zeros(3), np.array([1.0, 0, 0]), -1.0, 1.0)
    assert point_segment_distance(np.array([3.0, 0, 0]), s) == \
        pytest.approx(2.0)
