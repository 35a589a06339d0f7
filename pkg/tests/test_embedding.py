import filecmp

import numpy as np
import pytest

from mvrecon.corpus import Sphere, CorpusShape
from mvrecon.embedding import (PointDecoder, SdfDecoder, chamfer,
                               chamfer_with_gradient, fuse_codes_average,
                               fuse_codes_vote, load_checkpoint,
                               retrieve_nearest, save_checkpoint, sdf_loss)
from mvrecon.errors import EmptyCorpus, EmptySet
from mvrecon.training import ModelConfig, TrainConfig, train_joint


def brute_chamfer(a, b):
    d = np.linalg.norm(a[:, None] - b[None], axis=2)
    return d.min(axis=1).__pow__(2).mean() + d.min(axis=0).__pow__(2).mean()


def test_chamfer_identity_is_zero():
    a = np.random.default_rng(0).normal(size=(40, 3))
    assert chamfer(a, a) == 0.0


def test_chamfer_unit_separation():
    assert chamfer([[0.0, 0, 0]], [[1.0, 0, 0]]) == pytest.approx(2.0)


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(50, 3))
    b = rng.normal(size=(50, 3))
    assert chamfer(a, b) == pytest.approx(brute_chamfer(a, b), abs=1e-12)


def test_chamfer_rejects_empty_sets():
    with pytest.raises(EmptySet):
        chamfer(np.zeros((0, 3)), np.zeros((5, 3)))


def test_chamfer_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(12, 3))
    b = rng.normal(size=(15, 3))
    _, grad = chamfer_with_gradient(a, b)
    h = 1e-6
    for idx in [(0, 0), (5, 2), (11, 1)]:
        ap = a.copy()
        ap[idx] += h
        am = a.copy()
        am[idx] -= h
        fd = (chamfer(ap, b) - chamfer(am, b)) / (2 * h)
        assert grad[idx] == pytest.approx(fd, abs=1e-5)


def test_sdf_loss_worked_values():
    assert np.all(sdf_loss(np.array([0.3]), np.array([0.3])) == 0.0)
    assert sdf_loss(np.array([0.5]), np.array([-0.5]),
                    truncation=0.1)[0] == pytest.approx(0.2)
    assert sdf_loss(np.array([0.05]), np.array([0.02]),
                    truncation=0.1)[0] == pytest.approx(0.03)
    with pytest.raises(ValueError):
        sdf_loss(np.zeros(1), np.zeros(1), truncation=0.0)


# ---------------------------------------------------------------- fusion


def test_average_fusion():
    z = np.arange(6.0)
    assert np.array_equal(fuse_codes_average([z]), z)
    assert np.allclose(fuse_codes_average([z, -z]), 0.0)
    rng = np.random.default_rng(3)
    codes = rng.normal(size=(7, 6))
    assert np.allclose(fuse_codes_average(codes), codes.mean(axis=0))
    with pytest.raises(EmptySet):
        fuse_codes_average(np.zeros((0, 6)))


def corpus_grid():
    # four corpus codes far apart on one axis
    return np.array([[0.0, 0], [10.0, 0], [20.0, 0], [30.0, 0]])


def test_vote_fusion_unanimous():
    corpus = corpus_grid()
    codes = corpus[2] + np.array([[0.1, 0], [-0.2, 0.1], [0.05, -0.1]])
    out = fuse_codes_vote(codes, corpus, k=1)
    assert np.array_equal(out, corpus[2])


def test_vote_fusion_majority():
    corpus = corpus_grid()
    codes = np.array([[0.1, 0.0], [-0.3, 0.0], [20.2, 0.0]])
    out = fuse_codes_vote(codes, corpus, k=1)
    assert np.array_equal(out, corpus[0])


def test_vote_fusion_tie_prefers_smaller_mean_distance():
    corpus = corpus_grid()
    codes = np.array([[0.5, 0.0], [20.1, 0.0]])  # one vote each
    out = fuse_codes_vote(codes, corpus, k=1)
    assert np.array_equal(out, corpus[2])
    with pytest.raises(EmptyCorpus):
        fuse_codes_vote(codes, np.zeros((0, 2)))


def test_retrieval_orders_by_code_distance():
    rng = np.random.default_rng(4)
    corpus = rng.normal(size=(9, 5))
    ids = np.arange(100, 109)
    got = retrieve_nearest(corpus[4], corpus, ids, m=1)
    assert got[0] == (104, 0.0)
    z = rng.normal(size=5)
    full = retrieve_nearest(z, corpus, ids, m=9)
    d = np.linalg.norm(corpus - z, axis=1)
    assert [g[0] for g in full] == [int(ids[i]) for i in np.argsort(d)]
    assert all(a[1] <= b[1] for a, b in zip(full, full[1:]))
    with pytest.raises(ValueError):
        retrieve_nearest(z, corpus, ids, m=10)


# ---------------------------------------------------------------- decoders


def test_decoders_are_deterministic(model):
    z = model.code_of(int(model.shape_ids[0]))
    p1 = model.point_decoder.decode(z)
    p2 = model.point_decoder.decode(z)
    assert np.array_equal(p1, p2)
    q = np.random.default_rng(5).uniform(-0.5, 0.5, size=(64, 3))
    v1 = model.sdf_decoder.evaluate(q, z)
    v2 = model.sdf_decoder.evaluate(q, z)
    assert np.array_equal(v1, v2)


def test_point_decoder_jacobian_matches_finite_differences():
    rng = np.random.default_rng(6)
    dec = PointDecoder(latent_dim=4, hidden=(16, 24), n_points=8,
                       activation="softplus", rng=rng)
    z = rng.normal(size=4) * 0.5
    jac = dec.code_jacobian(z)
    h = 1e-6
    for k in range(4):
        zp = z.copy()
        zp[k] += h
        zm = z.copy()
        zm[k] -= h
        fd = (dec.decode(zp) - dec.decode(zm)) / (2 * h)
        assert np.allclose(jac[:, :, k], fd, atol=1e-5)


def test_sdf_decoder_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    dec = SdfDecoder(latent_dim=4, hidden=(16, 16), rng=rng)
    z = rng.normal(size=4) * 0.5
    pts = rng.uniform(-0.6, 0.6, size=(5, 3))
    val, gx, gz = dec.gradients(pts, z)
    assert np.allclose(val, dec.evaluate(pts, z))
    h = 1e-6
    for k in range(3):
        dp = np.zeros(3)
        dp[k] = h
        fd = (dec.evaluate(pts + dp, z) - dec.evaluate(pts - dp, z)) / (2 * h)
        assert np.allclose(gx[:, k], fd, atol=1e-6)
    for k in range(4):
        zp = z.copy()
        zp[k] += h
        zm = z.copy()
        zm[k] -= h
        fd = (dec.evaluate(pts, zp) - dec.evaluate(pts, zm)) / (2 * h)
        assert np.allclose(gz[:, k], fd, atol=1e-6)


def test_checkpoint_roundtrip_is_stable(model, tmp_path):
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    save_checkpoint(a, model)
    again = load_checkpoint(a)
    save_checkpoint(b, again)
    assert filecmp.cmp(a, b, shallow=False)
    z = model.code_of(int(model.shape_ids[3]))
    assert np.array_equal(again.point_decoder.decode(z),
                          model.point_decoder.decode(z))
    assert np.array_equal(again.shape_ids, model.shape_ids)


def test_load_rejects_foreign_json(tmp_path):
    p = tmp_path / "junk.json"
    p.write_text('{"format": "something-else"}')
    with pytest.raises(ValueError):
        load_checkpoint(p)


# ---------------------------------------------------------------- training


def tiny_model_config():
    return ModelConfig(latent_dim=8, point_hidden=(32, 64), n_points=64,
                       point_activation="softplus", sdf_hidden=(24, 24),
                       sdf_activation="tanh", truncation=0.1)


def tiny_train_config(**kw):
    base = dict(epochs=150, batch_shapes=4, sdf_samples_per_shape=512,
                sdf_batch=64, surface_samples=128, decay_every=50)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_learning_rate_changes_nothing():
    shapes = [CorpusShape(0, Sphere(0.5))]
    kw = dict(lr_net=0.0, lr_codes=0.0)
    m1, _ = train_joint(shapes, tiny_model_config(),
                        tiny_train_config(epochs=2, **kw))
    m2, _ = train_joint(shapes, tiny_model_config(),
                        tiny_train_config(epochs=20, **kw))
    for w1, w2 in zip(m1.point_decoder.net.weights,
                      m2.point_decoder.net.weights):
        assert np.array_equal(w1, w2)
    for w1, w2 in zip(m1.sdf_decoder.net.weights,
                      m2.sdf_decoder.net.weights):
        assert np.array_equal(w1, w2)
    assert np.array_equal(m1.codes, m2.codes)


def test_single_shape_overfits():
    shapes = [CorpusShape(0, Sphere(0.45))]
    mc = tiny_model_config()
    mc.n_points = 192  # enough coverage to push chamfer below the bar
    model, hist = train_joint(shapes, mc,
                              tiny_train_config(epochs=400, decay_every=100))
    z = model.code_of(0)
    cloud = model.point_decoder.decode(z)
    gt = shapes[0].primitive.sample_surface(512, np.random.default_rng(0))
    assert chamfer(cloud, gt) < 1e-2
    assert hist.epochs[-1]["loss_chamfer"] < 1e-2


def test_loss_decreases_over_epoch_windows():
    rng = np.random.default_rng(8)
    shapes = [CorpusShape(i, Sphere(0.3 + 0.1 * i)) for i in range(3)]
    _, hist = train_joint(shapes, tiny_model_config(),
                          tiny_train_config(epochs=300, decay_every=100),
                          rng=rng)
    losses = np.array([e["loss_total"] for e in hist.epochs])
    windows = losses.reshape(3, 100).mean(axis=1)
    assert np.all(np.diff(windows) <= 0)


def test_training_rejects_empty_corpus():
    with pytest.raises(EmptyCorpus):
        train_joint([], tiny_model_config(), tiny_train_config())
