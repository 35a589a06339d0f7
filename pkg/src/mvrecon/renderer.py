"""Software z-buffer rasterizer for proxy meshes.

Produces, per view and pyramid level, the pixel payloads the dense
energy terms consume: depth, instance mask, object-frame surface point,
and the field gradients interpolated from mesh vertices. Positions and
depth are interpolated perspective-correctly; the gradient payloads are
interpolated affinely in screen space (the error of that approximation
shrinks with triangle size, so it vanishes at the fine pyramid levels).

Rendering happens inside a crop window of the full image, downscaled by
2^level. Output pixel (r, c) corresponds to full-resolution image
coordinates x = x0 + (c + 0.5) * 2^level - 0.5 and likewise for y, so
level-0 rendering with a zero crop origin is the identity mapping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyLevels

R_MIN_DEFAULT = 40.0
R_MAX_DEFAULT = 400.0
Z_NEAR = 1e-6


def select_pyramid_levels(w, h, r_min=R_MIN_DEFAULT, r_max=R_MAX_DEFAULT):
    """Nonnegative levels l with r_min^2 < w*h/4^l < r_max^2 (strict)."""
    if w <= 0 or h <= 0:
        raise ValueError("degenerate size")
    area = float(w) * float(h)
    levels = []
    l = 0
    while area / 4.0 ** l > r_min ** 2:
        if area / 4.0 ** l < r_max ** 2:
            levels.append(l)
        l += 1
    if not levels:
        raise EmptyLevels(f"no pyramid level fits {w}x{h} "
                          f"within ({r_min}, {r_max})")
    return levels


@dataclass
class RenderBuffers:
    """Per-pixel payloads for one (view, level) rasterization."""

    depth: np.ndarray      # (H, W) camera-frame z, +inf where empty
    mask: np.ndarray       # (H, W) bool
    point: np.ndarray      # (H, W, 3) object-frame surface point
    normal: np.ndarray     # (H, W, 3) interpolated spatial gradient
    jac_code: np.ndarray   # (H, W, d) interpolated code gradient
    level: int
    x0: float              # crop origin, full-resolution pixels
    y0: float
    nothing_visible: bool

    @property
    def scale(self):
        return 2.0 ** self.level

    def pixel_to_image(self, rows, cols):
        """Buffer pixel centers -> full-resolution image coordinates."""
        s = self.scale
        x = self.x0 + (np.asarray(cols, dtype=np.float64) + 0.5) * s - 0.5
        y = self.y0 + (np.asarray(rows, dtype=np.float64) + 0.5) * s - 0.5
        return x, y


def _ranges(counts):
    """Concatenated [0..c) for each c in counts."""
    total = int(counts.sum())
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    return np.arange(total) - starts


def rasterize(proxy, pose, cam, level, crop):
    """Z-buffered render of a proxy mesh into a crop at a pyramid level.

    proxy : ProxyMesh (object-frame vertices with gradient payloads)
    pose : SimilarityTransform, object -> world
    cam : PinholeCamera
    crop : BBox2 in full-resolution image coordinates
    """
    scale = 2.0 ** int(level)
    W = max(int(np.ceil(crop.width / scale)), 1)
    H = max(int(np.ceil(crop.height / scale)), 1)
    d = proxy.grad_z.shape[1]

    depth = np.full((H, W), np.inf)
    mask = np.zeros((H, W), dtype=bool)
    point = np.zeros((H, W, 3))
    normal = np.zeros((H, W, 3))
    jac_code = np.zeros((H, W, d))

    def empty():
        return RenderBuffers(depth, mask, point, normal, jac_code,
                             int(level), float(crop.x_min), float(crop.y_min), True)

    verts_obj = proxy.vertices
    xc = cam.world_to_cam(pose.apply(verts_obj))
    z = xc[:, 2]
    faces = proxy.faces
    safe_z = np.maximum(z, Z_NEAR)
    u = cam.fx * xc[:, 0] / safe_z + cam.cx
    v = cam.fy * xc[:, 1] / safe_z + cam.cy
    # buffer pixel coordinates
    pc = (u - crop.x_min + 0.5) / scale - 0.5
    pr = (v - crop.y_min + 0.5) / scale - 0.5

    fz = z[faces]
    visible = np.all(fz > Z_NEAR, axis=1)
    if not np.any(visible):
        return empty()

    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    # screen-space signed area; y grows downward, so outward-wound
    # faces of a closed mesh come out negative when front-facing
    area2 = ((pc[b] - pc[a]) * (pr[c] - pr[a])
             - (pr[b] - pr[a]) * (pc[c] - pc[a]))
    front = visible & (area2 < -1e-12)
    if not np.any(front):
        return empty()

    fidx = np.nonzero(front)[0]
    fa, fb, fc = a[fidx], b[fidx], c[fidx]
    c0 = np.maximum(np.ceil(np.minimum.reduce([pc[fa], pc[fb], pc[fc]])
                            - 0.5).astype(int), 0)
    c1 = np.minimum(np.floor(np.maximum.reduce([pc[fa], pc[fb], pc[fc]])
                             + 0.5).astype(int), W - 1)
    r0 = np.maximum(np.ceil(np.minimum.reduce([pr[fa], pr[fb], pr[fc]])
                            - 0.5).astype(int), 0)
    r1 = np.minimum(np.floor(np.maximum.reduce([pr[fa], pr[fb], pr[fc]])
                             + 0.5).astype(int), H - 1)
    bw = c1 - c0 + 1
    bh = r1 - r0 + 1
    keep = (bw > 0) & (bh > 0)
    if not np.any(keep):
        return empty()
    fidx, c0, r0, bw, bh = fidx[keep], c0[keep], r0[keep], bw[keep], bh[keep]

    counts = (bw * bh).astype(np.int64)
    cand_face = np.repeat(np.arange(len(fidx)), counts)
    lin = _ranges(counts)
    cand_c = c0[cand_face] + lin % bw[cand_face]
    cand_r = r0[cand_face] + lin // bw[cand_face]

    ga, gb, gc = a[fidx], b[fidx], c[fidx]
    ax, ay = pc[ga][cand_face], pr[ga][cand_face]
    bx, by = pc[gb][cand_face], pr[gb][cand_face]
    cx_, cy = pc[gc][cand_face], pr[gc][cand_face]
    px = cand_c.astype(np.float64)
    py = cand_r.astype(np.float64)

    w0 = (bx - px) * (cy - py) - (by - py) * (cx_ - px)
    w1 = (cx_ - px) * (ay - py) - (cy - py) * (ax - px)
    w2 = (ax - px) * (by - py) - (ay - py) * (bx - px)
    denom = w0 + w1 + w2
    inside = (w0 <= 0) & (w1 <= 0) & (w2 <= 0) & (denom < -1e-12)
    if not np.any(inside):
        return empty()
    cand_face = cand_face[inside]
    cand_c, cand_r = cand_c[inside], cand_r[inside]
    l0 = w0[inside] / denom[inside]
    l1 = w1[inside] / denom[inside]
    l2 = w2[inside] / denom[inside]

    va, vb, vc = ga[cand_face], gb[cand_face], gc[cand_face]
    inv_z = l0 / z[va] + l1 / z[vb] + l2 / z[vc]
    zpix = 1.0 / inv_z

    order = np.lexsort((zpix, cand_r * W + cand_c))
    pix = (cand_r * W + cand_c)[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    sel = order[first]

    rr, cc = cand_r[sel], cand_c[sel]
    va, vb, vc = va[sel], vb[sel], vc[sel]
    l0, l1, l2 = l0[sel], l1[sel], l2[sel]
    zs = zpix[sel]

    mask[rr, cc] = True
    depth[rr, cc] = zs
    wa = l0 / z[va] * zs
    wb = l1 / z[vb] * zs
    wc = l2 / z[vc] * zs
    point[rr, cc] = (wa[:, None] * verts_obj[va] + wb[:, None] * verts_obj[vb]
                     + wc[:, None] * verts_obj[vc])
    normal[rr, cc] = (l0[:, None] * proxy.grad_x[va]
                      + l1[:, None] * proxy.grad_x[vb]
                      + l2[:, None] * proxy.grad_x[vc])
    jac_code[rr, cc] = (l0[:, None] * proxy.grad_z[va]
                        + l1[:, None] * proxy.grad_z[vb]
                        + l2[:, None] * proxy.grad_z[vc])
    return RenderBuffers(depth, mask, point, normal, jac_code, int(level),
                         float(crop.x_min), float(crop.y_min), False)


def mask_boundary(mask):
    """Pixels of the mask with some 4-neighbor outside it (or on the edge)."""
    m = np.asarray(mask, dtype=bool)
    interior = np.zeros_like(m)
    interior[1:-1, 1:-1] = (m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1]
                            & m[1:-1, :-2] & m[1:-1, 2:])
    return m & ~interior
