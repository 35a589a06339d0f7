"""Synthetic multi-view scenes with exact ground truth.

Stands in for real detector + SLAM input: ray-traced grayscale frames
of corpus shapes under known similarity poses and camera trajectories,
plus per-object masks, jittered detections, and noisy surface keypoints.
Everything downstream (association, fusion, both optimization stages,
metrics) is exercised against these scenes, so determinism is strict:
one seed fixes every byte of the dataset.
"""

from __future__ import annotations

import os
import sys
import warnings
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from . import formats
from .corpus import MAX_REACH, CorpusShape, primitive_from_params
from .errors import ObjectNotVisible
from .geometry import BBox2, PinholeCamera, SimilarityTransform
from .mesher import extract_mesh, save_ply
from .pruning import Detection

LIGHT_DIR = np.array([0.35, -0.85, 0.4])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
BACKGROUND = 38.0  # gray level of empty pixels, 0..255 scale
AMBIENT = 0.25


class _FieldParams:
    def __init__(self, code):
        self.code = code

    def params(self):
        if self.code is None:
            return {"kind": "field"}
        return {"kind": "latent", "code": [float(v) for v in self.code]}


class FieldShape:
    """Scene geometry backed by an arbitrary signed distance field.

    Wrapping a trained decoder's field makes the rendered masks,
    keypoints, and ground-truth meshes exactly representable by that
    decoder, so optimization probes measure the solver rather than the
    decoder's approximation error. grad_fn defaults to central
    differences; pass the analytic gradient when available.
    """

    def __init__(self, sdf_fn, shape_id=-1, grad_fn=None, code=None,
                 mesh_spacing=0.04, mesh_refine=4, domain=1.0,
                 grad_eps=1e-4):
        self._fn = sdf_fn
        self._grad = grad_fn
        self.shape_id = shape_id
        self.primitive = _FieldParams(code)
        self._mesh_args = (mesh_spacing, mesh_refine, domain)
        self._eps = grad_eps
        self._mesh = None

    @staticmethod
    def from_decoder(sdf_decoder, z, shape_id=-1, **kw):
        z = np.asarray(z, dtype=np.float64)
        return FieldShape(lambda p: sdf_decoder.evaluate(p, z),
                          shape_id=shape_id,
                          grad_fn=lambda p: sdf_decoder.gradients(p, z)[1],
                          code=z, **kw)

    def sdf(self, points):
        return self._fn(np.atleast_2d(points))

    def sdf_gradient(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self._grad is not None:
            return self._grad(p)
        g = np.empty_like(p)
        for a in range(3):
            h = np.zeros(3)
            h[a] = self._eps
            g[:, a] = (self._fn(p + h) - self._fn(p - h)) / (2 * self._eps)
        return g

    def surface_mesh(self):
        if self._mesh is None:
            spacing, refine, domain = self._mesh_args
            self._mesh, _ = extract_mesh(self._fn, spacing, refine, domain)
        return self._mesh

    def sample_surface(self, n, rng):
        return self.surface_mesh().sample_surface(n, rng)


@dataclass
class NoiseSpec:
    jitter_px: float = 0.0
    keypoint_sigma: float = 0.0
    code_sigma: float = 0.0
    dropout: float = 0.0

    def to_dict(self):
        return {"jitter_px": float(self.jitter_px),
                "keypoint_sigma": float(self.keypoint_sigma),
                "code_sigma": float(self.code_sigma),
                "dropout": float(self.dropout)}


@dataclass
class SceneObject:
    shape: CorpusShape
    pose: SimilarityTransform
    class_id: str = ""

    def __post_init__(self):
        if not self.class_id:
            self.class_id = self.shape.primitive.params()["kind"]


@dataclass
class SceneSpec:
    objects: list
    trajectory: list  # PinholeCamera per frame
    width: int
    height: int
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    keypoints_per_object: int = 60
    min_views: int = 2

    def visibility_counts(self):
        """Frames in which each object's center projects inside the image."""
        counts = []
        for obj in self.objects:
            c = obj.pose.translation[None]
            n = 0
            for cam in self.trajectory:
                xc = cam.world_to_cam(c)
                if xc[0, 2] <= 0:
                    continue
                uv, _ = cam.project_cam(xc)
                if 0 <= uv[0, 0] < self.width and 0 <= uv[0, 1] < self.height:
                    n += 1
            counts.append(n)
        return counts

    def validate(self):
        for i, n in enumerate(self.visibility_counts()):
            if n < self.min_views:
                raise ValueError(
                    f"object {i} visible in {n} < {self.min_views} frames")


def look_at_camera(position, target, fx, fy, cx, cy, width, height,
                   up=(0.0, -1.0, 0.0)):
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    zax = target - position
    zax = zax / np.linalg.norm(zax)
    xax = np.cross(np.asarray(up, dtype=np.float64), zax)
    n = np.linalg.norm(xax)
    if n < 1e-12:  # looking straight along up: pick any orthogonal
        xax = np.cross(np.array([1.0, 0.0, 0.0]), zax)
        n = np.linalg.norm(xax)
    xax = xax / n
    yax = np.cross(zax, xax)
    R = np.stack([xax, yax, zax], axis=1)
    pose = SimilarityTransform.from_rotation_matrix(R, position, 1.0)
    return PinholeCamera(fx, fy, cx, cy, width, height, pose)


def orbit_trajectory(n_frames, target, radius, height, fx, width,
                     img_height, fy=None, start=0.0, sweep=2.0 * np.pi):
    """Cameras on a circle about `target`, all looking at it."""
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for k in range(n_frames):
        a = start + sweep * k / n_frames
        pos = target + np.array([radius * np.sin(a), height,
                                 -radius * np.cos(a)])
        cams.append(look_at_camera(pos, target, fx, fy or fx,
                                   width / 2.0 - 0.5, img_height / 2.0 - 0.5,
                                   width, img_height))
    return cams


# ---------------------------------------------------------------------------
# procedural albedo


def _hash01(ix, iy, iz, seed):
    """Deterministic lattice hash -> [0, 1). Integer mixing, no rng state."""
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
         ^ np.uint64(seed * 0x27D4EB2F165667C5 & 0xFFFFFFFFFFFFFFFF))
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(points, seed, cell=0.35):
    """Trilinear value noise on an integer lattice, C0 and seam-free."""
    p = np.atleast_2d(points) / cell
    i0 = np.floor(p).astype(np.int64)
    f = p - i0
    f = f * f * (3.0 - 2.0 * f)  # smoothstep per axis
    out = np.zeros(len(p))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (np.where(dx, f[:, 0], 1 - f[:, 0])
                     * np.where(dy, f[:, 1], 1 - f[:, 1])
                     * np.where(dz, f[:, 2], 1 - f[:, 2]))
                out += w * _hash01(i0[:, 0] + dx, i0[:, 1] + dy,
                                   i0[:, 2] + dz, seed)
    return out


def object_albedo(points_obj, obj_index, seed):
    coarse = value_noise(points_obj, seed * 7919 + obj_index, cell=0.45)
    fine = value_noise(points_obj, seed * 104729 + obj_index, cell=0.16)
    return 0.45 + 0.45 * coarse + 0.10 * fine


# ---------------------------------------------------------------------------
# rendering


@dataclass
class FrameRender:
    frame_id: int
    image: np.ndarray   # (H, W) float 0..255
    masks: np.ndarray   # (n_objects, H, W) bool
    depth: np.ndarray   # (H, W) camera z, +inf background


def _trace_object(obj, cam, width, height, max_steps=96, tol=1e-5):
    """Sphere-trace one object; returns (hit mask, depth, obj-frame points).

    Rays outside the object's bounding sphere never start marching. A
    ray counts as a hit when it comes within half a pixel's footprint
    of the surface, not only on |sdf| < tol: grazing rays converge too
    slowly for a fixed step budget and a strict threshold erodes the
    silhouette rim by a pixel or two, which biases any consumer that
    reads mask boundaries.
    """
    H, W = height, width
    yy, xx = np.mgrid[:H, :W]
    R = cam.pose_world_from_cam.rotation_matrix
    dirs_cam = np.stack([(xx - cam.cx) / cam.fx, (yy - cam.cy) / cam.fy,
                         np.ones((H, W))], axis=-1)
    dirs = dirs_cam.reshape(-1, 3) @ R.T
    dz = dirs_cam[..., 2].reshape(-1)  # 1.0, kept for clarity
    norms = np.linalg.norm(dirs, axis=1)
    dirs_u = dirs / norms[:, None]

    inv = obj.pose.inverse()
    o = inv.apply(cam.center[None])[0]
    d = dirs_u @ obj.pose.rotation_matrix  # R^T applied to each row

    reach = MAX_REACH * 1.02
    b = d @ o
    disc = b * b - (o @ o - reach * reach)
    active = disc > 0
    t_near = np.maximum(-b[active] - np.sqrt(disc[active]), 0.0)
    t_far = -b[active] + np.sqrt(disc[active])

    idx = np.nonzero(active)[0]
    tau = t_near.copy()
    alive = np.ones(len(idx), dtype=bool)
    hit = np.zeros(len(idx), dtype=bool)
    # half-pixel angular footprint, object units per unit tau
    px = 0.5 / max(cam.fx, cam.fy)
    for _ in range(max_steps):
        if not alive.any():
            break
        q = o[None] + tau[alive, None] * d[idx[alive]]
        f = obj.shape.sdf(q)
        h = f < np.maximum(tol, px * tau[alive])
        hit_now = np.zeros(len(idx), dtype=bool)
        hit_now[np.nonzero(alive)[0][h]] = True
        hit |= hit_now
        tau[alive] += np.maximum(f, tol) * 0.95
        alive = alive & ~hit & (tau <= t_far)

    full_hit = np.zeros(H * W, dtype=bool)
    full_hit[idx[hit]] = True
    depth = np.full(H * W, np.inf)
    pts_obj = np.zeros((H * W, 3))
    if hit.any():
        tau_h = tau[hit]
        q = o[None] + tau_h[:, None] * d[idx[hit]]
        pts_obj[idx[hit]] = q
        # object-frame ray length -> world length -> camera z
        t_world = tau_h * obj.pose.scale
        depth[idx[hit]] = t_world * (dz[idx[hit]] / norms[idx[hit]])
    return (full_hit.reshape(H, W), depth.reshape(H, W),
            pts_obj.reshape(H, W, 3))


def render_scene(spec):
    """Ray-trace every frame; returns a list of FrameRender."""
    frames = []
    n_obj = len(spec.objects)
    seen = np.zeros(n_obj, dtype=int)
    for fid, cam in enumerate(spec.trajectory):
        H, W = spec.height, spec.width
        img = np.full((H, W), BACKGROUND)
        depth = np.full((H, W), np.inf)
        owner = np.full((H, W), -1)
        pts_all = np.zeros((n_obj, H, W, 3))
        for i, obj in enumerate(spec.objects):
            hit, dep, pts = _trace_object(obj, cam, W, H)
            closer = hit & (dep < depth)
            depth[closer] = dep[closer]
            owner[closer] = i
            pts_all[i] = pts
        masks = np.zeros((n_obj, H, W), dtype=bool)
        for i, obj in enumerate(spec.objects):
            m = owner == i
            if not m.any():
                continue
            masks[i] = m
            seen[i] += 1
            q = pts_all[i][m]
            n_obj_frame = obj.shape.sdf_gradient(q)
            n_world = n_obj_frame @ obj.pose.rotation_matrix.T
            n_world /= np.maximum(
                np.linalg.norm(n_world, axis=1, keepdims=True), 1e-12)
            shade = AMBIENT + (1 - AMBIENT) * np.clip(
                n_world @ -LIGHT_DIR, 0.0, None)
            img[m] = 255.0 * np.clip(
                object_albedo(q, i, spec.seed) * shade, 0.0, 1.0)
        frames.append(FrameRender(fid, img, masks, depth))
    for i, n in enumerate(seen):
        if n == 0:
            warnings.warn(f"object {i} is not visible in any frame",
                          ObjectNotVisible)
    return frames


# ---------------------------------------------------------------------------
# emitters


def _tight_bbox(mask):
    cols = np.nonzero(mask.any(axis=0))[0]
    rows = np.nonzero(mask.any(axis=1))[0]
    return BBox2(cols[0] - 0.5, rows[0] - 0.5, cols[-1] + 0.5, rows[-1] + 0.5)


def emit_detections(frames, spec, codes=None):
    """Detections per frame: tight jittered bboxes, masks, noisy codes.

    codes: optional {shape_id: latent vector} lookup (typically the
    trained corpus codes); when present each detection carries the true
    object's code plus isotropic Gaussian noise of spec.noise.code_sigma.
    """
    rng = np.random.default_rng((spec.seed, 1))
    out = []
    j = spec.noise.jitter_px
    for fr in frames:
        k = 0
        for i, obj in enumerate(spec.objects):
            mask = fr.masks[i]
            if not mask.any():
                continue
            if spec.noise.dropout > 0 and rng.random() < spec.noise.dropout:
                continue
            bb = _tight_bbox(mask)
            if j > 0:
                e = rng.uniform(-j, j, size=4)
                x0, y0 = bb.x_min + e[0], bb.y_min + e[1]
                x1, y1 = bb.x_max + e[2], bb.y_max + e[3]
                bb = BBox2(min(x0, x1 - 0.5), min(y0, y1 - 0.5),
                           max(x1, x0 + 0.5), max(y1, y0 + 0.5))
            code = None
            if codes is not None:
                code = np.asarray(codes[obj.shape.shape_id], dtype=np.float64)
                if spec.noise.code_sigma > 0:
                    code = code + rng.normal(
                        scale=spec.noise.code_sigma, size=code.shape)
            out.append(Detection(frame_id=fr.frame_id, bbox=bb, mask=mask,
                                 class_id=obj.class_id,
                                 score=float(rng.uniform(0.7, 1.0)),
                                 instance_hint=i, code=code, index=k))
            k += 1
    return out


def emit_keypoints(spec):
    """Noisy ground-truth surface samples per object, world frame."""
    rng = np.random.default_rng((spec.seed, 2))
    out = {}
    n = spec.keypoints_per_object
    for i, obj in enumerate(spec.objects):
        if n == 0:
            out[i] = np.zeros((0, 3))
            continue
        pts = obj.shape.sample_surface(n, rng)
        world = obj.pose.apply(pts)
        if spec.noise.keypoint_sigma > 0:
            world = world + rng.normal(scale=spec.noise.keypoint_sigma,
                                       size=world.shape)
        out[i] = world
    return out


# ---------------------------------------------------------------------------
# scene files


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k} = {_fmt(x)}" for k, x in v.items()) + "}"
    raise TypeError(f"cannot serialize {type(v)}")


def save_scene_spec(path, spec):
    lines = ["[scene]",
             f"width = {spec.width}",
             f"height = {spec.height}",
             f"seed = {spec.seed}",
             f"keypoints_per_object = {spec.keypoints_per_object}",
             f"min_views = {spec.min_views}",
             "",
             "[noise]"]
    for k, v in spec.noise.to_dict().items():
        lines.append(f"{k} = {_fmt(v)}")
    for obj in spec.objects:
        lines.append("")
        lines.append("[[object]]")
        lines.append(f"shape_id = {obj.shape.shape_id}")
        lines.append(f"class_id = {_fmt(obj.class_id)}")
        lines.append(f"primitive = {_fmt(obj.shape.primitive.params())}")
        q = obj.pose.rotation
        t = obj.pose.translation
        lines.append(f"q_wxyz = {_fmt(list(q))}")
        lines.append(f"t_xyz = {_fmt(list(t))}")
        lines.append(f"scale = {_fmt(obj.pose.scale)}")
    for cam in spec.trajectory:
        lines.append("")
        lines.append("[[camera]]")
        lines.append(f"fx = {_fmt(cam.fx)}")
        lines.append(f"fy = {_fmt(cam.fy)}")
        lines.append(f"cx = {_fmt(cam.cx)}")
        lines.append(f"cy = {_fmt(cam.cy)}")
        q = cam.pose_world_from_cam.rotation
        t = cam.pose_world_from_cam.translation
        lines.append(f"q_wxyz = {_fmt(list(q))}")
        lines.append(f"t_xyz = {_fmt(list(t))}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_scene_spec(path, model=None):
    """Rebuild a SceneSpec from scene.toml.

    Latent-backed objects need the trained model that owns their codes;
    pass it as model (a JointModel or anything with .sdf_decoder).
    """
    with open(path, "rb") as f:
        doc = _toml.load(f)
    sc = doc["scene"]
    noise = NoiseSpec(**doc.get("noise", {}))
    objects = []
    for rec in doc.get("object", []):
        prec = rec["primitive"]
        if prec.get("kind") == "latent":
            if model is None:
                raise formats.FormatError(
                    "scene has latent-backed objects; a model is required")
            shape = FieldShape.from_decoder(
                model.sdf_decoder, np.asarray(prec["code"]),
                shape_id=int(rec["shape_id"]))
        elif prec.get("kind") == "field":
            raise formats.FormatError(
                "anonymous field shapes cannot be reloaded")
        else:
            prim = primitive_from_params(prec)
            shape = CorpusShape(int(rec["shape_id"]), prim)
        pose = SimilarityTransform(
            np.asarray(rec["q_wxyz"], dtype=np.float64),
            np.asarray(rec["t_xyz"], dtype=np.float64),
            float(rec["scale"]))
        objects.append(SceneObject(shape, pose, rec.get("class_id", "")))
    cams = []
    for rec in doc.get("camera", []):
        pose = SimilarityTransform(
            np.asarray(rec["q_wxyz"], dtype=np.float64),
            np.asarray(rec["t_xyz"], dtype=np.float64), 1.0)
        cams.append(PinholeCamera(rec["fx"], rec["fy"], rec["cx"], rec["cy"],
                                  int(sc["width"]), int(sc["height"]), pose))
    return SceneSpec(objects, cams, int(sc["width"]), int(sc["height"]),
                     noise, int(sc["seed"]),
                     int(sc.get("keypoints_per_object", 60)),
                     int(sc.get("min_views", 2)))


def write_dataset(out_dir, spec, codes=None, gt_mesh_spacing=0.1):
    """Render and emit the full on-disk dataset layout.

    out_dir/
      scene.toml, trajectory.json, detections.jsonl, keypoints.json
      frames/frame_NNNN.pgm
      gt/poses.json, gt/object_NN.ply (object-frame meshes)
    """
    spec.validate()
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "gt"), exist_ok=True)

    frames = render_scene(spec)
    for fr in frames:
        formats.save_pgm(
            os.path.join(out_dir, "frames", f"frame_{fr.frame_id:04d}.pgm"),
            fr.image)
    formats.save_trajectory(os.path.join(out_dir, "trajectory.json"),
                            dict(enumerate(spec.trajectory)))
    dets = emit_detections(frames, spec, codes)
    formats.save_detections(os.path.join(out_dir, "detections.jsonl"), dets)
    kps = emit_keypoints(spec)
    formats.save_keypoints(os.path.join(out_dir, "keypoints.json"), kps)

    poses = {}
    for i, obj in enumerate(spec.objects):
        poses[i] = {"pose": obj.pose, "shape_id": obj.shape.shape_id,
                    "class_id": obj.class_id}
        if hasattr(obj.shape, "surface_mesh"):
            mesh = obj.shape.surface_mesh()
        else:
            mesh, _ = extract_mesh(obj.shape.sdf, spacing=gt_mesh_spacing)
        save_ply(os.path.join(out_dir, "gt", f"object_{i:02d}.ply"), mesh)
    formats.save_poses(os.path.join(out_dir, "gt", "poses.json"), poses)
    save_scene_spec(os.path.join(out_dir, "scene.toml"), spec)
    return frames, dets, kps
