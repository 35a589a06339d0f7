"""Joint latent shape space: point decoder, SDF decoder, fusion, retrieval.

A single latent code drives two decoders: one emits a fixed-size
surface point cloud, the other a continuous signed distance field.
Training (see :mod:`mvrecon.training`) optimizes both decoders and the
per-shape codes jointly, so a code optimized against one representation
stays meaningful in the other.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCorpus, EmptySet
from .mlp import DenseNet

DEFAULT_LATENT_DIM = 64
DEFAULT_TRUNCATION = 0.1

# documented "full" preset (point branch widths and output count); desk
# configurations scale these down
FULL_POINT_HIDDEN = (512, 1024, 2048)
FULL_POINT_COUNT = 2048


def chamfer(a, b):
    """Symmetric squared-distance Chamfer pseudo-metric.

    mean over a of squared distance to nearest b, plus the reverse.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise EmptySet("chamfer needs two nonempty point sets")
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return float(np.mean(d_ab ** 2) + np.mean(d_ba ** 2))


def chamfer_with_gradient(a, b):
    """Chamfer value plus its gradient with respect to the first set.

    Nearest-neighbor assignments are treated as locally constant.
    Used by the training loop; `a` is the predicted cloud.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    tree_b = cKDTree(b)
    d_ab, j_ab = tree_b.query(a, k=1)
    tree_a = cKDTree(a)
    d_ba, j_ba = tree_a.query(b, k=1)
    value = float(np.mean(d_ab ** 2) + np.mean(d_ba ** 2))
    grad = 2.0 * (a - b[j_ab]) / len(a)
    np.add.at(grad, j_ba, 2.0 * (a[j_ba] - b) / len(b))
    return value, grad


def sdf_loss(pred, gt, truncation=DEFAULT_TRUNCATION):
    """Clipped L1 distance between predicted and true signed distances."""
    if truncation <= 0:
        raise ValueError("truncation must be positive")
    t = truncation
    return np.abs(np.clip(pred, -t, t) - np.clip(gt, -t, t))


class PointDecoder:
    """Latent code -> fixed-size surface point cloud."""

    def __init__(self, latent_dim=DEFAULT_LATENT_DIM,
                 hidden=FULL_POINT_HIDDEN, n_points=FULL_POINT_COUNT,
                 activation="relu", rng=None):
        self.latent_dim = int(latent_dim)
        self.n_points = int(n_points)
        self.net = DenseNet([latent_dim, *hidden, 3 * self.n_points],
                            activation=activation, rng=rng)

    def decode(self, z):
        """(d,) -> (n_points, 3), or (batch, d) -> (batch, n_points, 3)."""
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        out = self.net.forward(np.atleast_2d(z))
        pts = out.reshape(-1, self.n_points, 3)
        return pts[0] if single else pts

    def code_jacobian(self, z):
        """d(points)/d(code), shape (n_points, 3, d)."""
        jac = self.net.input_jacobian(np.atleast_2d(z))[0]
        return jac.reshape(self.n_points, 3, self.latent_dim)

    def decode_with_cache(self, z_batch):
        out, cache = self.net.forward_cache(np.atleast_2d(z_batch))
        return out.reshape(-1, self.n_points, 3), cache

    def backward(self, cache, grad_points):
        """grad_points (batch, n, 3) -> (grad_codes, parameter grads)."""
        g = np.asarray(grad_points).reshape(len(grad_points), -1)
        return self.net.backward(cache, g)


class SdfDecoder:
    """(query point, latent code) -> signed distance, truncation-aware.

    Smooth activations keep the spatial gradient defined everywhere,
    which the surface-tracking Jacobians rely on.
    """

    def __init__(self, latent_dim=DEFAULT_LATENT_DIM, hidden=(128, 128, 128),
                 truncation=DEFAULT_TRUNCATION, activation="tanh", rng=None):
        self.latent_dim = int(latent_dim)
        self.truncation = float(truncation)
        self.net = DenseNet([3 + latent_dim, *hidden, 1],
                            activation=activation, rng=rng)
        # start the field near zero: every training sample then sits inside
        # the truncation band where the clipped loss has live gradient
        self.net.weights[-1] *= 0.05

    def _stack(self, points, z):
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            z = np.broadcast_to(z, (len(p), self.latent_dim))
        return np.concatenate([p, z], axis=1)

    def evaluate(self, points, z):
        """Signed distance at (n, 3) points for one code (or per-row codes)."""
        return self.net.forward(self._stack(points, z))[:, 0]

    def gradients(self, points, z):
        """Values plus exact input gradients.

        Returns (values (n,), d/d(point) (n, 3), d/d(code) (n, d)).
        One backward pass serves the whole batch since the output is
        scalar per row.
        """
        xin = self._stack(points, z)
        val, cache = self.net.forward_cache(xin)
        grad_in, _ = self.net.backward(cache, np.ones_like(val),
                                       need_param_grads=False)
        return val[:, 0], grad_in[:, :3], grad_in[:, 3:]

    def evaluate_with_cache(self, points, z):
        xin = self._stack(points, z)
        val, cache = self.net.forward_cache(xin)
        return val[:, 0], cache

    def backward(self, cache, grad_values):
        """grad_values (n,) -> (grad wrt (x,z) rows (n, 3+d), param grads)."""
        g = np.asarray(grad_values, dtype=np.float64).reshape(-1, 1)
        return self.net.backward(cache, g)


# ---------------------------------------------------------------------------
# code fusion and retrieval


def fuse_codes_average(codes):
    """Componentwise mean of per-detection codes."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    if codes.size == 0:
        raise EmptySet("no codes to fuse")
    return codes.mean(axis=0)


def fuse_codes_vote(codes, corpus_codes, shape_ids=None, k=4):
    """Majority vote over k nearest corpus codes of every input code.

    Returns the winning corpus code; ties break on smaller mean
    distance, then smaller shape id. Guarantees the result is a valid
    corpus entry, unlike averaging.
    """
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    corpus_codes = np.atleast_2d(np.asarray(corpus_codes, dtype=np.float64))
    if codes.size == 0:
        raise EmptySet("no codes to fuse")
    if corpus_codes.size == 0:
        raise EmptyCorpus("vote fusion needs corpus codes")
    if shape_ids is None:
        shape_ids = np.arange(len(corpus_codes))
    shape_ids = np.asarray(shape_ids)
    k = min(int(k), len(corpus_codes))
    dists = np.linalg.norm(codes[:, None, :] - corpus_codes[None, :, :],
                           axis=2)
    neighbors = np.argsort(dists, axis=1, kind="stable")[:, :k]
    counts = np.zeros(len(corpus_codes), dtype=int)
    dist_sums = np.zeros(len(corpus_codes))
    for row, nb in enumerate(neighbors):
        counts[nb] += 1
        dist_sums[nb] += dists[row, nb]
    best = None
    for idx in range(len(corpus_codes)):
        if counts[idx] == 0:
            continue
        key = (-counts[idx], dist_sums[idx] / counts[idx], shape_ids[idx])
        if best is None or key < best[0]:
            best = (key, idx)
    return corpus_codes[best[1]].copy()


def retrieve_nearest(z, corpus_codes, shape_ids=None, m=1):
    """m corpus shapes ranked by Euclidean code distance (ascending)."""
    corpus_codes = np.atleast_2d(np.asarray(corpus_codes, dtype=np.float64))
    if corpus_codes.size == 0:
        raise EmptyCorpus("retrieval over empty corpus")
    if m > len(corpus_codes):
        raise ValueError("m exceeds corpus size")
    if shape_ids is None:
        shape_ids = np.arange(len(corpus_codes))
    d = np.linalg.norm(corpus_codes - np.asarray(z, dtype=np.float64), axis=1)
    order = np.argsort(d, kind="stable")[:m]
    return [(int(shape_ids[i]), float(d[i])) for i in order]


# ---------------------------------------------------------------------------
# checkpoints


def _encode_array(a):
    return base64.b64encode(
        np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def _decode_array(s, shape):
    a = np.frombuffer(base64.b64decode(s), dtype="<f4").astype(np.float64)
    return a.reshape(shape)


def _net_to_dict(net):
    return {
        "layer_sizes": net.layer_sizes,
        "activation": net.activation,
        "weights": [_encode_array(w) for w in net.weights],
        "biases": [_encode_array(b) for b in net.biases],
    }


def _net_from_dict(d, net):
    sizes = d["layer_sizes"]
    weights = [_decode_array(s, (sizes[i], sizes[i + 1]))
               for i, s in enumerate(d["weights"])]
    biases = [_decode_array(s, (sizes[i + 1],))
              for i, s in enumerate(d["biases"])]
    net.set_params(weights, biases)


@dataclass
class JointModel:
    """Trained decoders plus the corpus codes they were trained with."""

    point_decoder: PointDecoder
    sdf_decoder: SdfDecoder
    codes: np.ndarray  # (n_shapes, latent_dim)
    shape_ids: np.ndarray

    @property
    def latent_dim(self):
        return self.point_decoder.latent_dim

    @property
    def truncation(self):
        return self.sdf_decoder.truncation

    def code_of(self, shape_id):
        idx = np.nonzero(self.shape_ids == shape_id)[0]
        if len(idx) == 0:
            raise KeyError(f"no trained code for shape {shape_id}")
        return self.codes[idx[0]].copy()


def save_checkpoint(path, model: JointModel):
    """Self-describing JSON checkpoint, float32 little-endian payload."""
    doc = {
        "format": "mvrecon-joint-v1",
        "latent_dim": model.latent_dim,
        "truncation": model.truncation,
        "n_points": model.point_decoder.n_points,
        "point_decoder": _net_to_dict(model.point_decoder.net),
        "sdf_decoder": _net_to_dict(model.sdf_decoder.net),
        "shape_ids": [int(i) for i in model.shape_ids],
        "codes": _encode_array(model.codes),
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def load_checkpoint(path):
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != "mvrecon-joint-v1":
        raise ValueError("not a joint-model checkpoint")
    d = int(doc["latent_dim"])
    pd_sizes = doc["point_decoder"]["layer_sizes"]
    point = PointDecoder(latent_dim=d, hidden=pd_sizes[1:-1],
                         n_points=pd_sizes[-1] // 3,
                         activation=doc["point_decoder"]["activation"])
    _net_from_dict(doc["point_decoder"], point.net)
    sd_sizes = doc["sdf_decoder"]["layer_sizes"]
    sdf = SdfDecoder(latent_dim=d, hidden=sd_sizes[1:-1],
                     truncation=float(doc["truncation"]),
                     activation=doc["sdf_decoder"]["activation"])
    _net_from_dict(doc["sdf_decoder"], sdf.net)
    shape_ids = np.asarray(doc["shape_ids"], dtype=int)
    codes = _decode_array(doc["codes"], (len(shape_ids), d))
    return JointModel(point, sdf, codes, shape_ids)
