import numpy as np
import pytest

from mvrecon.corpus import (Capsule, CorpusShape, Cylinder, MAX_REACH,
                            Offset, RoundedBox, Sphere, Union,
                            generate_corpus, load_corpus_spec,
                            primitive_from_params, save_corpus_spec)


ZOO = [
    Sphere(0.5),
    RoundedBox(np.array([0.4, 0.3, 0.25]), 0.05),
    Cylinder(0.3, 0.45),
    Capsule(0.2, 0.35),
    Offset(Sphere(0.4), np.array([0.1, -0.05, 0.2])),
    Union(Sphere(0.3), RoundedBox(np.array([0.2, 0.2, 0.5]), 0.02)),
]


@pytest.mark.parametrize("prim", ZOO, ids=lambda p: type(p).__name__)
def test_sampled_surface_sits_on_zero_level(prim):
    pts = prim.sample_surface(400, np.random.default_rng(0))
    assert pts.shape == (400, 3)
    assert np.max(np.abs(prim.sdf(pts))) < 1e-9


@pytest.mark.parametrize("prim", ZOO, ids=lambda p: type(p).__name__)
def test_sdf_sign_inside_and_outside(prim):
    assert prim.sdf(np.zeros((1, 3)))[0] < 0 or isinstance(prim, Union)
    far = np.array([[3.0, 3.0, 3.0]])
    assert prim.sdf(far)[0] > 0


def test_sphere_sdf_is_exact_radial_distance():
    s = Sphere(0.5)
    pts = np.array([[0.0, 0, 0], [0.5, 0, 0], [1.0, 0, 0], [0, 0.25, 0]])
    assert np.allclose(s.sdf(pts), [-0.5, 0.0, 0.5, -0.25])


def test_gradient_is_unit_near_surface():
    for prim in ZOO:
        pts = prim.sample_surface(50, np.random.default_rng(1))
        pts = pts + prim.sdf_gradient(pts) * 0.03
        g = prim.sdf_gradient(pts)
        assert np.allclose(np.linalg.norm(g, axis=1), 1.0, atol=1e-3)


def test_corpus_fits_inside_the_working_cube():
    for shape in generate_corpus(25, seed=3):
        pts = shape.sample_surface(300, np.random.default_rng(2))
        assert np.all(np.abs(pts) <= MAX_REACH + 1e-9)


def test_corpus_is_deterministic():
    a = generate_corpus(10, seed=7)
    b = generate_corpus(10, seed=7)
    for sa, sb in zip(a, b):
        assert sa.shape_id == sb.shape_id
        assert sa.primitive.params() == sb.primitive.params()
    c = generate_corpus(10, seed=8)
    assert any(sa.primitive.params() != sc.primitive.params()
               for sa, sc in zip(a, c))


def test_params_roundtrip_through_factory():
    for prim in ZOO:
        clone = primitive_from_params(prim.params())
        pts = np.random.default_rng(4).uniform(-1, 1, size=(64, 3))
        assert np.allclose(clone.sdf(pts), prim.sdf(pts))


def test_corpus_spec_roundtrip(tmp_path):
    shapes = generate_corpus(6, seed=5)
    p = tmp_path / "corpus.toml"
    save_corpus_spec(p, shapes, seed=5)
    back = load_corpus_spec(p)
    assert [s.shape_id for s in back] == [s.shape_id for s in shapes]
    pts = np.random.default_rng(6).uniform(-0.9, 0.9, size=(32, 3))
    for sa, sb in zip(shapes, back):
        assert np.allclose(sa.sdf(pts), sb.sdf(pts))
