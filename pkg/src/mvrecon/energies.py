"""Residual blocks for the two-stage multi-view refinement.

Every block follows the same contract:

  S = block.freeze(z, pose)        # discrete choices at linearization
  r = block.residuals(z, pose, S)  # smooth in (z, pose tangent) given S
  J = block.jacobian(z, pose, S)   # analytic d r / d [z, tangent]

The freeze step pins everything non-smooth (nearest-point assignments,
clamp active sets, pixel selections, view pairings), so within one
Gauss-Newton linearization the residual function is differentiable and
its Jacobian can be checked against finite differences directly. Robust
kernels are applied per scalar component at assembly time (IRLS
weights), never inside the residuals.

Parameter layout: columns [0:d] latent code, [d:d+7] similarity tangent
(rotation 3, translation 3, log scale 1) anchored at the linearization
pose via SimilarityTransform.perturbed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .sampling import sample_image

N_POSE = 7


def skew(v):
    v = np.atleast_2d(v)
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def world_point_jacobian(pose, x_w):
    """d(world point)/d(pose tangent) for points X = s R x + t. (n,3,7)."""
    n = len(x_w)
    J = np.zeros((n, 3, N_POSE))
    v = x_w - pose.translation
    J[:, :, 0:3] = -skew(v)
    J[:, :, 3:6] = np.eye(3)
    J[:, :, 6] = v
    return J


def object_point_jacobian(pose, y_world, y_obj):
    """d(object-frame point)/d(pose tangent) for y_obj = pose^-1(y). (n,3,7)."""
    n = len(y_world)
    Rt = pose.rotation_matrix.T
    J = np.zeros((n, 3, N_POSE))
    J[:, :, 0:3] = np.einsum("ab,nbc->nac", Rt / pose.scale,
                             skew(y_world - pose.translation))
    J[:, :, 3:6] = -Rt / pose.scale
    J[:, :, 6] = -y_obj
    return J


def project_points(cam, x_w, z_floor=1e-3):
    """Pixel coords plus d(uv)/d(world point). Returns (uv, duv_dxw, z)."""
    Rt = cam.pose_world_from_cam.rotation_matrix.T
    xc = (x_w - cam.pose_world_from_cam.translation) @ Rt.T
    z = np.maximum(xc[:, 2], z_floor)
    u = cam.fx * xc[:, 0] / z + cam.cx
    v = cam.fy * xc[:, 1] / z + cam.cy
    n = len(x_w)
    duv_dxc = np.zeros((n, 2, 3))
    duv_dxc[:, 0, 0] = cam.fx / z
    duv_dxc[:, 0, 2] = -cam.fx * xc[:, 0] / z ** 2
    duv_dxc[:, 1, 1] = cam.fy / z
    duv_dxc[:, 1, 2] = -cam.fy * xc[:, 1] / z ** 2
    duv_dxw = np.einsum("nij,jk->nik", duv_dxc, Rt)
    return np.stack([u, v], axis=1), duv_dxw, xc[:, 2]


def huber_energy(r, k):
    if k is None:
        return float(np.sum(r * r))
    a = np.abs(r)
    quad = a <= k
    return float(np.sum(np.where(quad, r * r, 2.0 * k * a - k * k)))


def huber_weights(r, k):
    if k is None:
        return np.ones_like(r)
    a = np.abs(r)
    return np.where(a <= k, 1.0, k / np.maximum(a, 1e-300))


@dataclass
class SilhouetteView:
    """Per-view data for the sparse silhouette term.

    dt is the Euclidean distance transform of the detection mask (zero
    inside), computed on a mask padded by `pad` on each side so the
    field keeps growing smoothly past the frame border instead of
    flattening out there.
    """

    cam: object
    dt: np.ndarray
    pad: int


class SparseSilhouetteBlock:
    """Decoded surface points should project inside every detection mask.

    Views where the decoded cloud sits mostly behind the camera at the
    linearization point are dropped from that linearization (frozen
    choice, so the residual stays smooth within it).
    """

    name = "E_s"

    def __init__(self, point_decoder, views, huber=None):
        self.decoder = point_decoder
        self.views = views
        self.huber = huber

    def freeze(self, z, pose):
        x_w = pose.apply(self.decoder.decode(z))
        keep = []
        for i, v in enumerate(self.views):
            _, _, depth = project_points(v.cam, x_w)
            if np.mean(depth > 0) > 0.5:
                keep.append(i)
        return tuple(keep)

    def residuals(self, z, pose, S):
        pts = self.decoder.decode(z)
        x_w = pose.apply(pts)
        out = []
        for i in S:
            v = self.views[i]
            uv, _, _ = project_points(v.cam, x_w)
            out.append(sample_image(v.dt, uv[:, 0] + v.pad, uv[:, 1] + v.pad,
                                    with_gradient=False))
        return np.concatenate(out) if out else np.zeros(0)

    def jacobian(self, z, pose, S):
        pts = self.decoder.decode(z)
        dpdz = self.decoder.code_jacobian(z)  # (n, 3, d)
        x_w = pose.apply(pts)
        sR = pose.scale * pose.rotation_matrix
        dxw_dz = np.einsum("ab,nbd->nad", sR, dpdz)
        dxw_dt = world_point_jacobian(pose, x_w)
        rows = []
        for i in S:
            v = self.views[i]
            uv, duv_dxw, _ = project_points(v.cam, x_w)
            _, gx, gy = sample_image(v.dt, uv[:, 0] + v.pad, uv[:, 1] + v.pad)
            g = np.stack([gx, gy], axis=1)  # (n, 2)
            dr_dxw = np.einsum("ni,nij->nj", g, duv_dxw)
            Jz = np.einsum("nj,njd->nd", dr_dxw, dxw_dz)
            Jt = np.einsum("nj,njt->nt", dr_dxw, dxw_dt)
            rows.append(np.concatenate([Jz, Jt], axis=1))
        return (np.concatenate(rows, axis=0) if rows
                else np.zeros((0, dpdz.shape[2] + N_POSE)))


class SparseKeypointBlock:
    """Keypoints should coincide with their nearest decoded point.

    Residuals are the 3-vector gaps in the object frame against the
    assignment frozen at linearization (classic alternating scheme,
    refreezing never increases the energy).
    """

    name = "E_g"
    huber = None

    def __init__(self, point_decoder, keypoints_world):
        self.decoder = point_decoder
        self.kp = np.atleast_2d(keypoints_world)

    def freeze(self, z, pose):
        pts = self.decoder.decode(z)
        y_obj = pose.inverse().apply(self.kp)
        _, idx = cKDTree(pts).query(y_obj, k=1)
        return idx

    def residuals(self, z, pose, S):
        pts = self.decoder.decode(z)
        y_obj = pose.inverse().apply(self.kp)
        return (y_obj - pts[S]).reshape(-1)

    def jacobian(self, z, pose, S):
        dpdz = self.decoder.code_jacobian(z)[S]  # (m, 3, d)
        y_obj = pose.inverse().apply(self.kp)
        dy_dt = object_point_jacobian(pose, self.kp, y_obj)
        return np.concatenate([-dpdz, dy_dt], axis=2).reshape(
            len(self.kp) * 3, -1)


class DenseKeypointBlock:
    """Field readout at the keypoints, clamped to the truncation band.

    Rows outside the band at freeze time contribute a constant and an
    all-zero Jacobian row (they re-enter at the next linearization if
    the state moves them back inside).
    """

    name = "E_g"
    huber = None

    def __init__(self, sdf_decoder, keypoints_world):
        self.decoder = sdf_decoder
        self.kp = np.atleast_2d(keypoints_world)

    def freeze(self, z, pose):
        y_obj = pose.inverse().apply(self.kp)
        vals = self.decoder.evaluate(y_obj, z)
        t = self.decoder.truncation
        active = np.abs(vals) < t
        return active, np.clip(vals, -t, t)

    def residuals(self, z, pose, S):
        active, held = S
        y_obj = pose.inverse().apply(self.kp)
        vals = self.decoder.evaluate(y_obj, z)
        return np.where(active, vals, held)

    def jacobian(self, z, pose, S):
        active, _ = S
        y_obj = pose.inverse().apply(self.kp)
        _, gx, gz = self.decoder.gradients(y_obj, z)
        dy_dt = object_point_jacobian(pose, self.kp, y_obj)
        Jt = np.einsum("ni,nit->nt", gx, dy_dt)
        J = np.concatenate([gz, Jt], axis=1)
        J[~active] = 0.0
        return J


@dataclass
class SurfacePixels:
    """First-order surface model for a set of rendered pixels.

    x(z) = x0 + jxz (z - z_ref), valid near the code the proxy mesh was
    extracted at. Everything here is frozen per outer iteration.
    """

    x0: np.ndarray      # (n, 3) object-frame points
    jxz: np.ndarray     # (n, 3, d)
    z_ref: np.ndarray   # (d,)

    def points(self, z):
        return self.x0 + np.einsum("nij,j->ni", self.jxz, z - self.z_ref)


def surface_pixels_from_buffers(buffers, rows, cols, z_ref):
    gx = buffers.normal[rows, cols]
    gz = buffers.jac_code[rows, cols]
    nrm2 = np.sum(gx * gx, axis=1)
    safe = np.maximum(nrm2, 1e-12)
    jxz = -(gx[:, :, None] / safe[:, None, None]) * gz[:, None, :]
    # interpolation can shrink the gradient near silhouette edges; a
    # near-zero normal means the first-order surface model is unusable,
    # so pin those pixels in the code direction rather than divide by it
    jxz[nrm2 < 1e-8] = 0.0
    return SurfacePixels(buffers.point[rows, cols].copy(), jxz,
                         np.asarray(z_ref, dtype=np.float64).copy())


class PhotoBlock:
    """Intensity constancy between paired views through surface points.

    One row per selected rendered pixel: the world point implied by the
    pixel's surface model must look the same in its own view and the
    paired view. Both samples move with the state, so the residual is
    differentiable on both ends.
    """

    name = "E_p"

    def __init__(self, terms, huber=10.0):
        # terms: list of (SurfacePixels, cam_a, img_a, pad_a, cam_b, img_b, pad_b)
        self.terms = terms
        self.huber = huber

    def freeze(self, z, pose):
        return None

    def _row_iter(self, z, pose):
        for sp, cam_a, img_a, pad_a, cam_b, img_b, pad_b in self.terms:
            x_obj = sp.points(z)
            x_w = pose.apply(x_obj)
            yield sp, x_obj, x_w, cam_a, img_a, pad_a, cam_b, img_b, pad_b

    def residuals(self, z, pose, S):
        out = []
        for (sp, x_obj, x_w, cam_a, img_a, pad_a,
             cam_b, img_b, pad_b) in self._row_iter(z, pose):
            uva, _, _ = project_points(cam_a, x_w)
            uvb, _, _ = project_points(cam_b, x_w)
            ia = sample_image(img_a, uva[:, 0] + pad_a, uva[:, 1] + pad_a,
                              with_gradient=False)
            ib = sample_image(img_b, uvb[:, 0] + pad_b, uvb[:, 1] + pad_b,
                              with_gradient=False)
            out.append(ia - ib)
        return np.concatenate(out) if out else np.zeros(0)

    def jacobian(self, z, pose, S):
        rows = []
        sR = pose.scale * pose.rotation_matrix
        for (sp, x_obj, x_w, cam_a, img_a, pad_a,
             cam_b, img_b, pad_b) in self._row_iter(z, pose):
            dxw_dz = np.einsum("ab,nbd->nad", sR, sp.jxz)
            dxw_dt = world_point_jacobian(pose, x_w)
            J = None
            for cam, img, pad, sign in ((cam_a, img_a, pad_a, 1.0),
                                        (cam_b, img_b, pad_b, -1.0)):
                uv, duv_dxw, _ = project_points(cam, x_w)
                _, gx, gy = sample_image(img, uv[:, 0] + pad, uv[:, 1] + pad)
                g = np.stack([gx, gy], axis=1)
                dr_dxw = sign * np.einsum("ni,nij->nj", g, duv_dxw)
                Jz = np.einsum("nj,njd->nd", dr_dxw, dxw_dz)
                Jt = np.einsum("nj,njt->nt", dr_dxw, dxw_dt)
                part = np.concatenate([Jz, Jt], axis=1)
                J = part if J is None else J + part
            rows.append(J)
        return (np.concatenate(rows, axis=0) if rows
                else np.zeros((0, sR.shape[0])))


class DenseSilhouetteBlock:
    """Symmetric boundary alignment between render and detection.

    Direction 1: each selected rendered-boundary pixel's surface point,
    projected into its view, reads the distance transform of the
    detection mask boundary (scalar px residual).

    Direction 2: each selected detection-boundary pixel pulls its
    nearest rendered-boundary pixel (frozen at construction) toward it
    (2-vector px residual).
    """

    name = "E_s"

    def __init__(self, dir1, dir2, huber=3.0):
        # dir1: list of (SurfacePixels, cam, bdt_img, pad)
        # dir2: list of (SurfacePixels, cam, target_uv (n, 2))
        self.dir1 = dir1
        self.dir2 = dir2
        self.huber = huber

    def freeze(self, z, pose):
        return None

    def residuals(self, z, pose, S):
        out = []
        for sp, cam, bdt, pad in self.dir1:
            x_w = pose.apply(sp.points(z))
            uv, _, _ = project_points(cam, x_w)
            out.append(sample_image(bdt, uv[:, 0] + pad, uv[:, 1] + pad,
                                    with_gradient=False))
        for sp, cam, target in self.dir2:
            x_w = pose.apply(sp.points(z))
            uv, _, _ = project_points(cam, x_w)
            out.append((uv - target).reshape(-1))
        return np.concatenate(out) if out else np.zeros(0)

    def jacobian(self, z, pose, S):
        rows = []
        sR = pose.scale * pose.rotation_matrix
        for sp, cam, bdt, pad in self.dir1:
            x_w = pose.apply(sp.points(z))
            dxw_dz = np.einsum("ab,nbd->nad", sR, sp.jxz)
            dxw_dt = world_point_jacobian(pose, x_w)
            uv, duv_dxw, _ = project_points(cam, x_w)
            _, gx, gy = sample_image(bdt, uv[:, 0] + pad, uv[:, 1] + pad)
            g = np.stack([gx, gy], axis=1)
            dr_dxw = np.einsum("ni,nij->nj", g, duv_dxw)
            Jz = np.einsum("nj,njd->nd", dr_dxw, dxw_dz)
            Jt = np.einsum("nj,njt->nt", dr_dxw, dxw_dt)
            rows.append(np.concatenate([Jz, Jt], axis=1))
        for sp, cam, target in self.dir2:
            x_w = pose.apply(sp.points(z))
            dxw_dz = np.einsum("ab,nbd->nad", sR, sp.jxz)
            dxw_dt = world_point_jacobian(pose, x_w)
            uv, duv_dxw, _ = project_points(cam, x_w)
            Jz = np.einsum("nij,njd->nid", duv_dxw, dxw_dz)
            Jt = np.einsum("nij,njt->nit", duv_dxw, dxw_dt)
            rows.append(np.concatenate([Jz, Jt], axis=2).reshape(
                2 * len(target), -1))
        return np.concatenate(rows, axis=0) if rows else np.zeros((0, 0))


class RegularizerBlock:
    """Gaussian prior on the code: residual vector z / sigma."""

    name = "E_r"
    huber = None

    def __init__(self, sigma, latent_dim):
        self.sigma = float(sigma)
        self.latent_dim = int(latent_dim)

    def freeze(self, z, pose):
        return None

    def residuals(self, z, pose, S):
        return np.asarray(z, dtype=np.float64) / self.sigma

    def jacobian(self, z, pose, S):
        J = np.zeros((self.latent_dim, self.latent_dim + N_POSE))
        J[:, :self.latent_dim] = np.eye(self.latent_dim) / self.sigma
        return J


# ---------------------------------------------------------------------------
# assembly


def assemble(blocks, weights, z, pose, frozen):
    """Weighted robust normal equations at a frozen linearization.

    Returns (E_total, per-term energies, H, g). Per-term energies are
    unweighted; E_total is their weighted sum.
    """
    d = len(z)
    n = d + N_POSE
    H = np.zeros((n, n))
    g = np.zeros(n)
    terms = {"E_s": 0.0, "E_p": 0.0, "E_g": 0.0, "E_r": 0.0}
    total = 0.0
    for block in blocks:
        w_block = weights[block.name]
        r = block.residuals(z, pose, frozen[block])
        if len(r) == 0:
            continue
        e = huber_energy(r, block.huber)
        terms[block.name] += e
        total += w_block * e
        if w_block == 0.0:
            continue
        J = block.jacobian(z, pose, frozen[block])
        w = w_block * huber_weights(r, block.huber)
        Jw = J * w[:, None]
        H += J.T @ Jw
        g += Jw.T @ r
    return total, terms, H, g


def total_energy(blocks, weights, z, pose, frozen):
    total = 0.0
    terms = {"E_s": 0.0, "E_p": 0.0, "E_g": 0.0, "E_r": 0.0}
    for block in blocks:
        r = block.residuals(z, pose, frozen[block])
        if len(r) == 0:
            continue
        e = huber_energy(r, block.huber)
        terms[block.name] += e
        total += weights[block.name] * e
    return total, terms
