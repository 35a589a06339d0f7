"""Two-stage refinement of (latent code, similarity pose) per object.

The sparse stage fits the point decoder's cloud against detection-mask
distance fields and mapped keypoints. The dense stage re-extracts a
proxy mesh from the field decoder every iteration, rasterizes it into
each view at a coarse-to-fine pyramid level, and drives photometric and
boundary-alignment residuals through per-pixel first-order surface
models. Both stages run Levenberg-damped Gauss-Newton: damping grows
x10 on a rejected step, shrinks /3 on an accepted one, and a step is
accepted only if it lowers the energy of its own (frozen) linearization
so the accepted-energy sequence is monotone by construction.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import energies as en
from .errors import Divergence, EmptyMesh, InsufficientViews
from .geometry import BBox2, SimilarityTransform
from .mesher import extract_mesh, attach_jacobians
from .renderer import (R_MAX_DEFAULT, R_MIN_DEFAULT, mask_boundary,
                       rasterize, select_pyramid_levels)

STAGE_SPARSE = "sparse"
STAGE_DENSE = "dense"


@dataclass
class EnergyConfig:
    """Weights, toggles and solver knobs for both stages."""

    w_s: float = 1.0
    w_p: float = 1.0
    w_g: float = 1.0
    w_r: float = 1e-2
    use_silhouette: bool = True
    use_photo: bool = True
    use_keypoints: bool = True
    use_regularizer: bool = True
    stage: str = STAGE_SPARSE
    max_iters_sparse: int = 100
    max_iters_dense: int = 20
    damping_init: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 3.0
    tol: float = 1e-4
    max_rejects: int = 8
    code_sigma: float = 10.0
    huber_photo: float = 10.0
    huber_silhouette: float = 3.0
    photo_pixels: int = 400
    boundary_pixels: int = 120
    crop_inflate: float = 1.3
    iters_per_level: int = 2
    mesh_spacing: float = 0.1
    mesh_refine: int = 4
    mesh_domain: float = 1.0
    dt_pad: int = 32
    r_min: float = R_MIN_DEFAULT
    r_max: float = R_MAX_DEFAULT
    seed: int = 0

    def __post_init__(self):
        for name in ("w_s", "w_p", "w_g", "w_r"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.stage not in (STAGE_SPARSE, STAGE_DENSE):
            raise ValueError(f"unknown stage {self.stage!r}")

    def weights(self):
        return {
            "E_s": self.w_s if self.use_silhouette else 0.0,
            "E_p": self.w_p if self.use_photo else 0.0,
            "E_g": self.w_g if self.use_keypoints else 0.0,
            "E_r": self.w_r if self.use_regularizer else 0.0,
        }

    def has_data_term(self):
        w = self.weights()
        keys = ("E_s", "E_g") if self.stage == STAGE_SPARSE \
            else ("E_s", "E_p", "E_g")
        return any(w[k] > 0 for k in keys)


@dataclass
class ViewObservation:
    """One pruned detection of the object plus its frame context.

    image is the full gray frame (float intensities on the 0..255
    scale) so every pixel coordinate stays in the camera's native
    convention; crops are cut where needed. keypoints are world-frame
    3-vectors near the object (may be empty or shared across views).
    """

    frame_id: int
    detection: object
    camera: object
    image: np.ndarray
    keypoints: np.ndarray = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        h, w = self.image.shape
        if (w, h) != (self.camera.width, self.camera.height):
            raise ValueError("image size does not match camera")
        if self.detection.mask.shape != self.image.shape:
            raise ValueError("detection mask not aligned to image")
        if self.keypoints is not None:
            self.keypoints = np.asarray(self.keypoints,
                                        dtype=np.float64).reshape(-1, 3)


@dataclass
class OptState:
    """Current estimate plus the audit trail of the run so far."""

    z: np.ndarray
    pose: SimilarityTransform
    history: list = field(default_factory=list)
    damping: float = 1e-4
    stop_reason: str = ""
    log: list = field(default_factory=list)

    def copy_estimate(self):
        return OptState(np.array(self.z, dtype=np.float64), self.pose)


def _solve_damped(H, g, damping):
    d = np.diag(H).copy()
    d[d < 1e-12] = 1e-12
    A = H + damping * np.diag(d) + 1e-12 * np.eye(len(d))
    try:
        return np.linalg.solve(A, -g)
    except np.linalg.LinAlgError:
        return None


def _log_row(state, it, stage, e_total, terms, damping, accepted):
    state.log.append({
        "iter": int(it),
        "stage": stage,
        "E_total": float(e_total),
        "E_s": float(terms["E_s"]),
        "E_p": float(terms["E_p"]),
        "E_g": float(terms["E_g"]),
        "E_r": float(terms["E_r"]),
        "damping": float(damping),
        "accepted": bool(accepted),
    })


def _gather_keypoints(views):
    rows = [v.keypoints for v in views
            if v.keypoints is not None and len(v.keypoints)]
    if not rows:
        return np.zeros((0, 3))
    return np.unique(np.concatenate(rows, axis=0), axis=0)


def _padded_mask_dt(mask, pad):
    """Distance transform that is zero inside the mask, on a padded frame."""
    big = np.zeros((mask.shape[0] + 2 * pad, mask.shape[1] + 2 * pad),
                   dtype=bool)
    big[pad:-pad, pad:-pad] = mask
    return ndimage.distance_transform_edt(~big)


def _padded_boundary_dt(mask, pad):
    """Distance to the mask's boundary curve, on a padded frame."""
    bnd = mask_boundary(mask)
    big = np.zeros((mask.shape[0] + 2 * pad, mask.shape[1] + 2 * pad),
                   dtype=bool)
    big[pad:-pad, pad:-pad] = bnd
    return ndimage.distance_transform_edt(~big)


def _inflated_crop(bbox, factor, cam):
    cx, cy = bbox.center
    hw = 0.5 * bbox.width * factor
    hh = 0.5 * bbox.height * factor
    return BBox2(cx - hw, cy - hh, cx + hw, cy + hh).clipped(
        cam.width, cam.height)


def _step_loop(state, blocks, weights, frozen, it, stage, cfg):
    """One linearization: assemble, then damped retries until accept.

    Returns (accepted, E0, E1) with E1 the accepted frozen-structure
    energy (E0 on failure).
    """
    z, pose = state.z, state.pose
    E0, terms0, H, g = en.assemble(blocks, weights, z, pose, frozen)
    if not np.isfinite(E0):
        raise Divergence(f"non-finite energy at {stage} iteration {it}")
    if it == 1:
        _log_row(state, 0, stage, E0, terms0, state.damping, True)
        state.history.append((0, E0, dict(terms0)))
    d = len(z)
    for _ in range(cfg.max_rejects):
        lam = state.damping
        delta = _solve_damped(H, g, lam)
        if delta is not None and np.all(np.isfinite(delta)):
            z1 = z + delta[:d]
            pose1 = pose.perturbed(delta[d:])
            E1, terms1 = en.total_energy(blocks, weights, z1, pose1, frozen)
            if np.isfinite(E1) and E1 < E0:
                state.damping = max(lam / cfg.damping_down, 1e-12)
                state.z, state.pose = z1, pose1
                _log_row(state, it, stage, E1, terms1, lam, True)
                state.history.append((it, E1, dict(terms1)))
                return True, E0, E1
            if np.isfinite(E1):
                _log_row(state, it, stage, E1, terms1, lam, False)
        state.damping = lam * cfg.damping_up
    return False, E0, E0


def optimize_sparse(init, views, model, cfg=None):
    """Fit (z, pose) with the point decoder against masks and keypoints."""
    cfg = dataclasses.replace(cfg or EnergyConfig(), stage=STAGE_SPARSE)
    weights = cfg.weights()
    state = init.copy_estimate()
    state.damping = cfg.damping_init

    blocks = []
    if weights["E_s"] > 0:
        sil_views = [en.SilhouetteView(
            v.camera, _padded_mask_dt(v.detection.mask, cfg.dt_pad),
            cfg.dt_pad) for v in views]
        blocks.append(en.SparseSilhouetteBlock(model.point_decoder,
                                               sil_views))
    kp = _gather_keypoints(views)
    if weights["E_g"] > 0 and len(kp):
        blocks.append(en.SparseKeypointBlock(model.point_decoder, kp))
    if weights["E_r"] > 0:
        blocks.append(en.RegularizerBlock(cfg.code_sigma, model.latent_dim))

    state.stop_reason = "max_iters"
    for it in range(1, cfg.max_iters_sparse + 1):
        frozen = {b: b.freeze(state.z, state.pose) for b in blocks}
        accepted, E0, E1 = _step_loop(state, blocks, weights, frozen,
                                      it, STAGE_SPARSE, cfg)
        if not accepted:
            state.stop_reason = "stall"
            break
        if abs(E0 - E1) <= cfg.tol * max(E0, 1e-12):
            state.stop_reason = "converged"
            break
    return state


def _view_levels(views, cfg):
    out = []
    for v in views:
        bb = v.detection.bbox
        out.append(select_pyramid_levels(bb.width, bb.height,
                                         cfg.r_min, cfg.r_max))
    return out


def _schedule_level(levels, accepted_steps, iters_per_level):
    # coarse to fine: walk the available levels from last to first
    idx = min(accepted_steps // max(iters_per_level, 1), len(levels) - 1)
    return levels[len(levels) - 1 - idx], idx == len(levels) - 1


def _photo_pairs(views, visible, pose):
    """Pair each visible view with its nearest-viewing-angle neighbor."""
    if len(visible) < 2:
        return {}
    dirs = {}
    for i in visible:
        d = pose.translation - views[i].camera.center
        n = np.linalg.norm(d)
        dirs[i] = d / n if n > 0 else np.array([0.0, 0.0, 1.0])
    pairs = {}
    for i in visible:
        best, best_dot = None, -2.0
        for j in visible:
            if j == i:
                continue
            dot = float(dirs[i] @ dirs[j])
            if dot > best_dot:
                best, best_dot = j, dot
        pairs[i] = best
    return pairs


def _subsample(rng, n_have, n_want):
    if n_have <= n_want:
        return np.arange(n_have)
    return np.sort(rng.choice(n_have, size=n_want, replace=False))


def _build_dense_blocks(state, views, model, cfg, static, it):
    """Extract, rasterize and assemble the per-iteration dense blocks."""
    z = state.z
    mesh, _ = extract_mesh(lambda p: model.sdf_decoder.evaluate(p, z),
                           cfg.mesh_spacing, cfg.mesh_refine,
                           cfg.mesh_domain)
    proxy = attach_jacobians(mesh, model.sdf_decoder, z)

    buffers = {}
    at_finest = True
    for i, v in enumerate(views):
        level, finest = _schedule_level(static["levels"][i],
                                        static["accepted"],
                                        cfg.iters_per_level)
        at_finest = at_finest and finest
        buf = rasterize(proxy, state.pose, v.camera, level,
                        static["crops"][i])
        if not buf.nothing_visible:
            buffers[i] = buf
    visible = sorted(buffers)

    weights = cfg.weights()
    blocks = list(static["blocks"])

    if weights["E_p"] > 0 and len(visible) >= 2:
        pairs = _photo_pairs(views, visible, state.pose)
        terms = []
        for a, b in pairs.items():
            buf = buffers[a]
            rows, cols = np.nonzero(buf.mask)
            if len(rows) == 0:
                continue
            rng = np.random.default_rng((cfg.seed, it, a, 0))
            keep = _subsample(rng, len(rows), cfg.photo_pixels)
            sp = en.surface_pixels_from_buffers(buf, rows[keep], cols[keep],
                                                proxy.z_ref)
            terms.append((sp, views[a].camera, views[a].image, 0,
                          views[b].camera, views[b].image, 0))
        if terms:
            blocks.append(en.PhotoBlock(terms, huber=cfg.huber_photo))

    if weights["E_s"] > 0:
        dir1, dir2 = [], []
        for i in visible:
            buf = buffers[i]
            rows, cols = np.nonzero(mask_boundary(buf.mask))
            if len(rows) == 0:
                continue
            rng = np.random.default_rng((cfg.seed, it, i, 1))
            keep = _subsample(rng, len(rows), cfg.boundary_pixels)
            sp = en.surface_pixels_from_buffers(buf, rows[keep], cols[keep],
                                                proxy.z_ref)
            dir1.append((sp, views[i].camera, static["boundary_dt"][i],
                         cfg.dt_pad))
            targets = static["boundary_px"][i]
            if len(targets):
                bx, by = buf.pixel_to_image(rows, cols)
                _, nn = cKDTree(np.stack([bx, by], axis=1)).query(targets)
                sp2 = en.surface_pixels_from_buffers(buf, rows[nn], cols[nn],
                                                     proxy.z_ref)
                dir2.append((sp2, views[i].camera, targets))
        if dir1 or dir2:
            blocks.append(en.DenseSilhouetteBlock(
                dir1, dir2, huber=cfg.huber_silhouette))

    return blocks, at_finest


def optimize_dense(init, views, model, cfg=None):
    """Refine (z, pose) with the field decoder through rendered proxies."""
    cfg = dataclasses.replace(cfg or EnergyConfig(), stage=STAGE_DENSE)
    weights = cfg.weights()
    if weights["E_p"] > 0 and len(views) < 2:
        raise InsufficientViews("photometric term needs at least two views")
    state = init.copy_estimate()
    state.damping = cfg.damping_init

    static = {
        "levels": _view_levels(views, cfg),
        "crops": [_inflated_crop(v.detection.bbox, cfg.crop_inflate,
                                 v.camera) for v in views],
        "boundary_dt": {},
        "boundary_px": {},
        "blocks": [],
        "accepted": 0,
    }
    if weights["E_s"] > 0:
        for i, v in enumerate(views):
            static["boundary_dt"][i] = _padded_boundary_dt(
                v.detection.mask, cfg.dt_pad)
            rows, cols = np.nonzero(mask_boundary(v.detection.mask))
            rng = np.random.default_rng((cfg.seed, i, 2))
            keep = _subsample(rng, len(rows), cfg.boundary_pixels)
            static["boundary_px"][i] = np.stack(
                [cols[keep], rows[keep]], axis=1).astype(np.float64)
    kp = _gather_keypoints(views)
    if weights["E_g"] > 0 and len(kp):
        static["blocks"].append(en.DenseKeypointBlock(model.sdf_decoder, kp))
    if weights["E_r"] > 0:
        static["blocks"].append(en.RegularizerBlock(cfg.code_sigma,
                                                    model.latent_dim))

    last_extractable = None
    state.stop_reason = "max_iters"
    for it in range(1, cfg.max_iters_dense + 1):
        try:
            blocks, at_finest = _build_dense_blocks(state, views, model,
                                                    cfg, static, it)
        except EmptyMesh:
            if last_extractable is None:
                raise
            state.z, state.pose = last_extractable
            state.damping *= cfg.damping_up
            continue
        last_extractable = (state.z.copy(), state.pose)
        frozen = {b: b.freeze(state.z, state.pose) for b in blocks}
        accepted, E0, E1 = _step_loop(state, blocks, weights, frozen,
                                      it, STAGE_DENSE, cfg)
        if not accepted:
            state.stop_reason = "stall"
            break
        static["accepted"] += 1
        if at_finest and abs(E0 - E1) <= cfg.tol * max(E0, 1e-12):
            state.stop_reason = "converged"
            break
    return state
