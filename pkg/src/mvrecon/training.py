"""Joint auto-decoder training for the two-branch shape embedding.

No encoder anywhere: per-shape codes are free variables optimized
alongside the decoder weights. The loss couples a point-cloud Chamfer
term, a truncated signed-distance regression term, and a Gaussian prior
on the codes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import sample_sdf_points
from .embedding import (JointModel, PointDecoder, SdfDecoder,
                        chamfer_with_gradient)
from .errors import Divergence, EmptyCorpus
from .mlp import Adam


@dataclass
class ModelConfig:
    latent_dim: int = 64
    point_hidden: tuple = (512, 1024, 2048)
    n_points: int = 2048
    point_activation: str = "relu"
    sdf_hidden: tuple = (128, 128, 128)
    sdf_activation: str = "tanh"
    truncation: float = 0.1

    @classmethod
    def full(cls):
        """Published-scale architecture. Heavy; not exercised in tests."""
        return cls()

    @classmethod
    def desk(cls):
        """Small preset that trains in about a minute on one core.

        Softplus in the point branch keeps the decode map C1 so its
        code Jacobian matches finite differences everywhere.
        """
        return cls(latent_dim=16, point_hidden=(64, 128, 256), n_points=512,
                   point_activation="softplus", sdf_hidden=(96, 96, 96),
                   sdf_activation="tanh", truncation=0.1)


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_shapes: int = 64
    sdf_samples_per_shape: int = 16384
    sdf_batch: int = 512
    surface_samples: int = 1024
    lr_net: float = 5e-3
    lr_codes: float = 1e-3
    decay: float = 0.5
    decay_every: int = 500
    lambda_chamfer: float = 1.0
    lambda_sdf: float = 1.0
    code_sigma: float = 10.0
    code_init_scale: float = 0.01
    seed: int = 0

    @classmethod
    def full(cls):
        return cls()

    @classmethod
    def desk(cls):
        return cls(epochs=400, batch_shapes=64, sdf_samples_per_shape=4096,
                   sdf_batch=512, surface_samples=1024, decay_every=100)


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)

    def append(self, **row):
        self.epochs.append(row)

    @property
    def final_loss(self):
        return self.epochs[-1]["loss_total"] if self.epochs else None


def train_joint(shapes, model_config=None, train_config=None, rng=None,
                verbose=False):
    """Fit decoders and codes to a corpus of exact-SDF shapes.

    Parameters
    ----------
    shapes : list of CorpusShape
    model_config, train_config : presets default to desk scale
    rng : seed or Generator; falls back to train_config.seed

    Returns
    -------
    (JointModel, TrainHistory)
    """
    if len(shapes) == 0:
        raise EmptyCorpus("cannot train on an empty corpus")
    mc = model_config or ModelConfig.desk()
    tc = train_config or TrainConfig.desk()
    rng = np.random.default_rng(tc.seed if rng is None else rng)

    point = PointDecoder(mc.latent_dim, mc.point_hidden, mc.n_points,
                         activation=mc.point_activation, rng=rng)
    sdf = SdfDecoder(mc.latent_dim, mc.sdf_hidden, mc.truncation,
                     activation=mc.sdf_activation, rng=rng)
    n = len(shapes)
    codes = tc.code_init_scale * rng.standard_normal((n, mc.latent_dim))

    # fixed targets, sampled once
    gt_clouds = [s.primitive.sample_surface(tc.surface_samples, rng)
                 for s in shapes]
    pools = [sample_sdf_points(s, tc.sdf_samples_per_shape, rng)
             for s in shapes]

    def live_params(net):
        out = []
        for w, b in zip(net.weights, net.biases):
            out.extend([w, b])
        return out

    opt_net = Adam(live_params(point.net) + live_params(sdf.net),
                   lr=tc.lr_net)
    opt_codes = Adam([codes], lr=tc.lr_codes)
    inv_sigma2 = 1.0 / tc.code_sigma ** 2
    t = mc.truncation

    history = TrainHistory()
    order = np.arange(n)
    for epoch in range(tc.epochs):
        if epoch > 0 and tc.decay_every > 0 and epoch % tc.decay_every == 0:
            opt_net.lr *= tc.decay
            opt_codes.lr *= tc.decay
        rng.shuffle(order)
        ep_ch = ep_sdf = ep_reg = 0.0
        for start in range(0, n, tc.batch_shapes):
            batch = order[start:start + tc.batch_shapes]
            nb = len(batch)
            z = codes[batch]

            # point branch: Chamfer on decoded clouds
            pts, p_cache = point.decode_with_cache(z)
            grad_pts = np.zeros_like(pts)
            loss_ch = 0.0
            for row, si in enumerate(batch):
                v, g = chamfer_with_gradient(pts[row], gt_clouds[si])
                loss_ch += v
                grad_pts[row] = g
            loss_ch /= nb
            grad_pts *= tc.lambda_chamfer / nb
            gz_point, pgrads_point = point.backward(p_cache, grad_pts)

            # SDF branch: clipped L1 on pooled samples
            take = rng.integers(0, tc.sdf_samples_per_shape,
                                size=(nb, tc.sdf_batch))
            qpts = np.concatenate(
                [pools[si][0][take[row]] for row, si in enumerate(batch)])
            qval = np.concatenate(
                [pools[si][1][take[row]] for row, si in enumerate(batch)])
            zrows = np.repeat(z, tc.sdf_batch, axis=0)
            pred, s_cache = sdf.evaluate_with_cache(qpts, zrows)
            cp = np.clip(pred, -t, t)
            cg = np.clip(qval, -t, t)
            loss_sdf = float(np.mean(np.abs(cp - cg)))
            d = np.sign(cp - cg) * (np.abs(pred) < t)
            d *= tc.lambda_sdf / len(pred)
            grad_rows, pgrads_sdf = sdf.backward(s_cache, d)
            gz_sdf = grad_rows[:, 3:].reshape(nb, tc.sdf_batch, -1).sum(axis=1)

            loss_reg = inv_sigma2 * float(np.sum(z ** 2)) / nb
            gz = gz_point + gz_sdf + 2.0 * inv_sigma2 * z / nb

            total = (tc.lambda_chamfer * loss_ch + tc.lambda_sdf * loss_sdf
                     + loss_reg)
            if not np.isfinite(total):
                raise Divergence(f"non-finite loss at epoch {epoch}")

            grad_codes = np.zeros_like(codes)
            grad_codes[batch] = gz
            flat_net = ([g for pair in pgrads_point for g in pair]
                        + [g for pair in pgrads_sdf for g in pair])
            opt_net.step(flat_net)
            opt_codes.step([grad_codes])

            w = nb / n
            ep_ch += loss_ch * w
            ep_sdf += loss_sdf * w
            ep_reg += loss_reg * w
        history.append(epoch=epoch,
                       loss_total=tc.lambda_chamfer * ep_ch
                       + tc.lambda_sdf * ep_sdf + ep_reg,
                       loss_chamfer=ep_ch, loss_sdf=ep_sdf, loss_reg=ep_reg)
        if verbose and (epoch % 25 == 0 or epoch == tc.epochs - 1):
            h = history.epochs[-1]
            print(f"epoch {epoch:4d}  total {h['loss_total']:.5f}  "
                  f"chamfer {ep_ch:.5f}  sdf {ep_sdf:.5f}")

    shape_ids = np.asarray([s.shape_id for s in shapes], dtype=int)
    model = JointModel(point, sdf, codes.copy(), shape_ids)
    return model, history
