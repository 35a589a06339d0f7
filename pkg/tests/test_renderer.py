import numpy as np
import pytest

from mvrecon.errors import EmptyLevels
from mvrecon.geometry import BBox2, PinholeCamera, SimilarityTransform
from mvrecon.mesher import ProxyMesh, extract_mesh
from mvrecon.renderer import (mask_boundary, rasterize,
                              select_pyramid_levels)


def cam(fx=200.0, w=320, h=240):
    return PinholeCamera(fx, fx, (w - 1) / 2, (h - 1) / 2, w, h,
                         SimilarityTransform.identity())


def proxy_from(vertices, faces, d=2):
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    return ProxyMesh(v, f, np.zeros((len(v), 3)), np.zeros((len(v), d)),
                     np.zeros(len(v), dtype=bool), np.zeros(d))


def full_crop(camera):
    return BBox2(0.0, 0.0, float(camera.width), float(camera.height))


IDENT = SimilarityTransform.identity()


def test_level_selection_for_vga_like_frame():
    assert select_pyramid_levels(320, 240) == [0, 1, 2]


def test_level_selection_skips_oversized_base():
    assert select_pyramid_levels(500, 500) == [1, 2, 3]


def test_level_selection_rejects_tiny_frames():
    with pytest.raises(EmptyLevels):
        select_pyramid_levels(30, 30)
    with pytest.raises(ValueError):
        select_pyramid_levels(0, 100)


def test_flat_triangle_renders_at_its_depth():
    p = proxy_from([[0, 0, 2.0], [0, 0.5, 2.0], [0.5, 0, 2.0]],
                   [[0, 1, 2]])
    c = cam()
    buf = rasterize(p, IDENT, c, 0, full_crop(c))
    assert not buf.nothing_visible
    assert buf.mask.sum() > 100
    got = buf.depth[buf.mask]
    assert np.max(np.abs(got - 2.0)) < 1e-4


def test_everything_behind_the_camera_renders_nothing():
    p = proxy_from([[0, 0, -2.0], [0, 0.5, -2.0], [0.5, 0, -2.0]],
                   [[0, 1, 2]])
    c = cam()
    buf = rasterize(p, IDENT, c, 0, full_crop(c))
    assert buf.nothing_visible
    assert not buf.mask.any()


def sphere_proxy(r=0.35):
    mesh, _ = extract_mesh(
        lambda q: np.linalg.norm(np.atleast_2d(q), axis=1) - r,
        spacing=0.06, refine_factor=2, domain=0.6)
    return proxy_from(mesh.vertices, mesh.faces)


def test_sphere_renders_a_disc_of_the_right_radius():
    r, dist, fx = 0.35, 2.5, 200.0
    p = sphere_proxy(r)
    c = cam(fx)
    pose = SimilarityTransform(IDENT.rotation, np.array([0, 0, dist]), 1.0)
    buf = rasterize(p, pose, c, 0, full_crop(c))
    rows, cols = np.nonzero(buf.mask)
    expect = fx * r / np.sqrt(dist ** 2 - r ** 2)
    assert (cols.max() - cols.min() + 1) / 2 == pytest.approx(expect, abs=1.0)
    assert (rows.max() - rows.min() + 1) / 2 == pytest.approx(expect, abs=1.0)
    inside = buf.depth[buf.mask]
    assert np.all((inside > dist - r - 0.02) & (inside < dist + 1e-6))


def test_coarser_level_sees_a_quarter_of_the_pixels():
    p = sphere_proxy()
    c = cam()
    pose = SimilarityTransform(IDENT.rotation, np.array([0, 0, 2.5]), 1.0)
    a0 = rasterize(p, pose, c, 0, full_crop(c)).mask.sum()
    a1 = rasterize(p, pose, c, 1, full_crop(c)).mask.sum()
    assert a1 == pytest.approx(a0 / 4, rel=0.15)


def test_surface_points_reproject_onto_their_pixels():
    p = proxy_from([[-0.2, -0.1, 2.0], [0.1, 0.4, 2.6], [0.5, -0.2, 2.2]],
                   [[0, 1, 2]])
    c = cam()
    buf = rasterize(p, IDENT, c, 0, full_crop(c))
    rows, cols = np.nonzero(buf.mask)
    pts = buf.point[rows, cols]
    uv, depth = c.project(pts)
    x, y = buf.pixel_to_image(rows, cols)
    assert np.max(np.abs(uv[:, 0] - x)) < 1e-6
    assert np.max(np.abs(uv[:, 1] - y)) < 1e-6
    assert np.allclose(depth, buf.depth[rows, cols], atol=1e-9)


def test_nearer_triangle_wins_the_z_buffer():
    verts = [[0, 0, 2.0], [0, 0.5, 2.0], [0.5, 0, 2.0],
             [0, 0, 1.5], [0, 0.5, 1.5], [0.5, 0, 1.5]]
    p = proxy_from(verts, [[0, 1, 2], [3, 4, 5]])
    c = cam()
    buf = rasterize(p, IDENT, c, 0, full_crop(c))
    # overlap region keeps the nearer depth
    assert np.min(buf.depth[buf.mask]) == pytest.approx(1.5, abs=1e-6)
    center = buf.depth[120, 165]
    assert center == pytest.approx(1.5, abs=1e-4)


def test_crop_window_shifts_pixel_coordinates():
    p = proxy_from([[0, 0, 2.0], [0, 0.5, 2.0], [0.5, 0, 2.0]],
                   [[0, 1, 2]])
    c = cam()
    whole = rasterize(p, IDENT, c, 0, full_crop(c))
    crop = BBox2(140.0, 100.0, 240.0, 180.0)
    sub = rasterize(p, IDENT, c, 0, crop)
    assert sub.mask.sum() > 0
    rows, cols = np.nonzero(sub.mask)
    x, y = sub.pixel_to_image(rows, cols)
    assert np.array_equal(
        whole.mask[y.astype(int), x.astype(int)],
        np.ones(len(rows), dtype=bool))


def test_interpolated_payloads_follow_vertex_attributes():
    v = np.array([[0, 0, 2.0], [0, 0.5, 2.0], [0.5, 0, 2.0]])
    gx = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    gz = np.array([[1.0, 0], [2.0, 0], [3.0, 0]])
    p = ProxyMesh(v, np.array([[0, 1, 2]]), gx, gz,
                  np.zeros(3, dtype=bool), np.zeros(2))
    c = cam()
    buf = rasterize(p, IDENT, c, 0, full_crop(c))
    n = buf.normal[buf.mask]
    assert np.allclose(n.sum(axis=1), 1.0, atol=1e-9)  # affine combo
    j = buf.jac_code[buf.mask]
    assert np.all((j[:, 0] > 1.0 - 1e-9) & (j[:, 0] < 3.0 + 1e-9))
    assert np.allclose(j[:, 1], 0.0)


def test_mask_boundary_is_the_one_pixel_rim():
    m = np.zeros((12, 12), dtype=bool)
    m[3:9, 2:10] = True
    b = mask_boundary(m)
    assert b[3, 2] and b[8, 9] and b[3, 5] and b[6, 2]
    assert not b[5, 5]
    assert b.sum() == m.sum() - 4 * 6
    edge = np.ones((4, 4), dtype=bool)
    assert mask_boundary(edge).sum() == 12
