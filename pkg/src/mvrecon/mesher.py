"""Adaptive field sampling and zero-level mesh extraction.

Two-level scheme: a coarse lattice over the shape domain at the
truncation spacing, then a refined lattice restricted to voxels whose
corner values come within one spacing of zero. The refined samples are
stitched into a dense grid (coarse cells fill by trilinear
interpolation, which cannot introduce crossings where corners agree in
sign) and the mesh comes from one marching-cubes pass over that grid,
so the result is watertight by construction.

Extracted vertices carry the field gradients needed to track the
surface as the latent code moves: for a vertex pinned to the zero set,
dx/dz = -grad_x * grad_z^T / ||grad_x||^2, the minimum-norm solution,
directed along the surface normal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from .errors import DegenerateGradient, EmptyMesh

GRAD_NORM_MIN = 1e-6


@dataclass
class SampleGrid:
    """Coarse values everywhere plus refined values near the surface."""

    origin: np.ndarray        # lattice corner, world coords
    spacing: float            # coarse spacing
    refine_factor: int
    coarse: np.ndarray        # (n, n, n)
    boundary_voxels: np.ndarray  # (n-1, n-1, n-1) bool
    refined_idx: np.ndarray   # (m, 3) indices into the fine lattice
    refined_val: np.ndarray   # (m,)
    n_evals: int              # decoder calls actually made

    @property
    def fine_spacing(self):
        return self.spacing / self.refine_factor

    @property
    def n_fine(self):
        return (self.coarse.shape[0] - 1) * self.refine_factor + 1


def sample_adaptive(sdf_fn, spacing=0.1, refine_factor=4, domain=1.0):
    """Sample a field coarsely everywhere, finely near its zero set.

    sdf_fn maps (n, 3) points to (n,) values. A voxel gets refined
    samples exactly when some corner value has |v| < spacing. Counts
    every evaluation; no lattice point is evaluated twice (refined
    points that coincide with coarse ones reuse the coarse value).
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    r = int(refine_factor)
    if r < 1:
        raise ValueError("refine_factor must be >= 1")
    n = int(round(2.0 * domain / spacing)) + 1
    axis = np.linspace(-domain, domain, n)
    spacing = float(axis[1] - axis[0])
    origin = np.full(3, -domain)

    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"),
                   axis=-1).reshape(-1, 3)
    coarse = np.asarray(sdf_fn(pts), dtype=np.float64).reshape(n, n, n)
    n_evals = pts.shape[0]

    near = np.abs(coarse) < spacing
    bvox = np.zeros((n - 1, n - 1, n - 1), dtype=bool)
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                bvox |= near[di:n - 1 + di, dj:n - 1 + dj, dk:n - 1 + dk]

    vox = np.argwhere(bvox)
    if len(vox) == 0 or r == 1:
        refined_idx = np.zeros((0, 3), dtype=np.int64)
        refined_val = np.zeros(0)
        return SampleGrid(origin, spacing, r, coarse, bvox,
                          refined_idx, refined_val, n_evals)

    off = np.stack(np.meshgrid(*([np.arange(r + 1)] * 3), indexing="ij"),
                   axis=-1).reshape(-1, 3)
    fine_idx = (vox[:, None, :] * r + off[None, :, :]).reshape(-1, 3)
    fine_idx = np.unique(fine_idx, axis=0)

    on_coarse = np.all(fine_idx % r == 0, axis=1)
    vals = np.empty(len(fine_idx))
    ci = fine_idx[on_coarse] // r
    vals[on_coarse] = coarse[ci[:, 0], ci[:, 1], ci[:, 2]]
    new_idx = fine_idx[~on_coarse]
    if len(new_idx):
        h = spacing / r
        vals[~on_coarse] = sdf_fn(origin + new_idx * h)
        n_evals += len(new_idx)

    return SampleGrid(origin, spacing, r, coarse, bvox,
                      fine_idx, vals, n_evals)


def _upsample_linear(a, r, axis):
    a = np.moveaxis(a, axis, 0)
    w = (np.arange(r) / r).reshape(-1, *([1] * (a.ndim - 1)))
    seg = a[:-1][:, None] * (1.0 - w) + a[1:][:, None] * w
    out = np.concatenate([seg.reshape(-1, *a.shape[1:]), a[-1:]], axis=0)
    return np.moveaxis(out, 0, axis)


def dense_fine_values(grid):
    """Full fine-lattice array: trilinear fill plus refined overwrites."""
    dense = grid.coarse
    r = grid.refine_factor
    if r > 1:
        for ax in range(3):
            dense = _upsample_linear(dense, r, ax)
    else:
        dense = dense.copy()
    if len(grid.refined_idx):
        i = grid.refined_idx
        dense[i[:, 0], i[:, 1], i[:, 2]] = grid.refined_val
    return dense


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray     # (F, 3) int

    def euler_characteristic(self):
        f = self.faces
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]],
                                        f[:, [2, 0]]]), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        return len(self.vertices) - n_edges + len(f)

    def is_closed(self):
        """Every edge shared by exactly two consistently wound faces."""
        f = self.faces
        if len(f) == 0:
            return False
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        _, counts = np.unique(directed, axis=0, return_counts=True)
        if np.any(counts != 1):
            return False
        undirected = np.sort(directed, axis=1)
        _, ucounts = np.unique(undirected, axis=0, return_counts=True)
        return bool(np.all(ucounts == 2))

    def face_normals(self, normalize=True):
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        if normalize:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True),
                               1e-300)
        return n

    def vertex_normals(self):
        """Area-weighted average of incident face normals, unit length."""
        fn = self.face_normals(normalize=False)
        out = np.zeros_like(self.vertices)
        for c in range(3):
            np.add.at(out, self.faces[:, c], fn)
        return out / np.maximum(np.linalg.norm(out, axis=1, keepdims=True),
                                1e-300)

    def surface_area(self):
        return 0.5 * np.linalg.norm(np.cross(
            self.vertices[self.faces[:, 1]] - self.vertices[self.faces[:, 0]],
            self.vertices[self.faces[:, 2]] - self.vertices[self.faces[:, 0]]),
            axis=1).sum()

    def sample_surface(self, n, rng):
        """n points uniform by area, with barycentric jitter."""
        rng = np.random.default_rng(rng)
        v = self.vertices
        f = self.faces
        areas = 0.5 * np.linalg.norm(
            np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]),
            axis=1)
        pick = rng.choice(len(f), size=n, p=areas / areas.sum())
        u = rng.random((n, 2))
        flip = u.sum(axis=1) > 1.0
        u[flip] = 1.0 - u[flip]
        a, b, c = v[f[pick, 0]], v[f[pick, 1]], v[f[pick, 2]]
        return a + u[:, :1] * (b - a) + u[:, 1:] * (c - a)


def marching_cubes(grid, level=0.0):
    """Zero-crossing mesh from a SampleGrid, outward orientation.

    Outward means triangle winding normals point towards increasing
    field values (positive outside).
    """
    dense = dense_fine_values(grid)
    if dense.min() > level or dense.max() < level:
        raise EmptyMesh("field has no zero crossing in the domain")
    # lattice values exactly at the level make crossings ambiguous
    # (vertices get emitted on both edges of the lattice point); nudge
    dense[dense == level] = level + 1e-12
    h = grid.fine_spacing
    try:
        verts, faces, _, _ = measure.marching_cubes(
            dense, level=level, spacing=(h, h, h),
            gradient_direction="ascent")
    except (ValueError, RuntimeError) as e:
        raise EmptyMesh(str(e))
    if len(verts) == 0 or len(faces) == 0:
        raise EmptyMesh("degenerate zero crossing")
    mesh = Mesh(verts.astype(np.float64) + grid.origin,
                faces.astype(np.int64))
    _orient_outward(mesh, dense, grid)
    return mesh


def _orient_outward(mesh, dense, grid):
    # probe a few faces: step along the winding normal, field must grow
    fn = mesh.face_normals()
    take = np.linspace(0, len(mesh.faces) - 1,
                       min(64, len(mesh.faces))).astype(int)
    centers = mesh.vertices[mesh.faces[take]].mean(axis=1)
    h = grid.fine_spacing
    votes = 0.0
    for s in (1.0, -1.0):
        p = centers + s * 0.5 * h * fn[take]
        votes += s * np.sum(_trilinear(dense, grid, p))
    if votes < 0:
        mesh.faces[:, [1, 2]] = mesh.faces[:, [2, 1]]


def _trilinear(dense, grid, pts):
    h = grid.fine_spacing
    x = (pts - grid.origin) / h
    x = np.clip(x, 0, np.array(dense.shape) - 1.000001)
    i = x.astype(int)
    f = x - i
    out = np.zeros(len(pts))
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                w = (np.where(di, f[:, 0], 1 - f[:, 0])
                     * np.where(dj, f[:, 1], 1 - f[:, 1])
                     * np.where(dk, f[:, 2], 1 - f[:, 2]))
                out += w * dense[i[:, 0] + di, i[:, 1] + dj, i[:, 2] + dk]
    return out


def extract_mesh(sdf_fn, spacing=0.1, refine_factor=4, domain=1.0):
    """sample_adaptive + marching_cubes; returns (mesh, grid)."""
    grid = sample_adaptive(sdf_fn, spacing, refine_factor, domain)
    return marching_cubes(grid), grid


# ---------------------------------------------------------------------------
# derivative payloads


@dataclass
class ProxyMesh:
    """Mesh plus per-vertex field gradients for surface tracking."""

    vertices: np.ndarray
    faces: np.ndarray
    grad_x: np.ndarray      # (V, 3) field gradient in space
    grad_z: np.ndarray      # (V, d) field gradient in the code
    degenerate: np.ndarray  # (V,) bool, ||grad_x|| below threshold
    z_ref: np.ndarray       # code the mesh was extracted at

    def as_mesh(self):
        return Mesh(self.vertices, self.faces)

    def vertex_normals(self):
        n = np.linalg.norm(self.grad_x, axis=1, keepdims=True)
        return self.grad_x / np.maximum(n, GRAD_NORM_MIN)

    def code_jacobian(self):
        return surface_code_jacobian(self.grad_x, self.grad_z)


def attach_jacobians(mesh, sdf_decoder, z):
    """Fill per-vertex gradient payloads with one batched backward pass."""
    _, gx, gz = sdf_decoder.gradients(mesh.vertices, z)
    degenerate = np.linalg.norm(gx, axis=1) < GRAD_NORM_MIN
    return ProxyMesh(mesh.vertices, mesh.faces, gx, gz, degenerate,
                     np.asarray(z, dtype=np.float64).copy())


def surface_code_jacobian(grad_x, grad_z):
    """Per-vertex dx/dz (V, 3, d) keeping each vertex on the zero set.

    Minimum-norm solution of grad_x . dx + grad_z dz = 0: a rank-1 map
    along the normal, dx/dz = -grad_x grad_z^T / ||grad_x||^2.
    """
    grad_x = np.atleast_2d(grad_x)
    grad_z = np.atleast_2d(grad_z)
    nrm2 = np.sum(grad_x ** 2, axis=1)
    if np.any(nrm2 < GRAD_NORM_MIN ** 2):
        raise DegenerateGradient("vanishing spatial gradient at a vertex")
    return -(grad_x[:, :, None] / nrm2[:, None, None]) * grad_z[:, None, :]


# ---------------------------------------------------------------------------
# mesh file formats


def save_ply(path, mesh, normals=None):
    """Binary little-endian PLY, optional per-vertex normals."""
    v = np.ascontiguousarray(mesh.vertices, dtype="<f4")
    f = np.ascontiguousarray(mesh.faces, dtype="<i4")
    props = ["property float x", "property float y", "property float z"]
    if normals is not None:
        props += ["property float nx", "property float ny",
                  "property float nz"]
        v = np.hstack([v, np.ascontiguousarray(normals, dtype="<f4")])
    header = "\n".join([
        "ply", "format binary_little_endian 1.0",
        f"element vertex {len(v)}", *props,
        f"element face {len(f)}",
        "property list uchar int vertex_indices", "end_header", ""])
    counts = np.full((len(f), 1), 3, dtype="u1")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(v.astype("<f4").tobytes())
        rows = [counts[i].tobytes() + f[i].tobytes() for i in range(len(f))]
        fh.write(b"".join(rows))


def load_ply(path):
    """Reader for the files save_ply writes (not a general PLY parser)."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    n_vert = n_face = 0
    n_props = 0
    in_vertex = False
    for line in header:
        if line.startswith("element vertex"):
            n_vert = int(line.split()[-1])
            in_vertex = True
        elif line.startswith("element face"):
            n_face = int(line.split()[-1])
            in_vertex = False
        elif line.startswith("property float") and in_vertex:
            n_props += 1
    body = data[end:]
    vbytes = n_vert * n_props * 4
    vdata = np.frombuffer(body[:vbytes], dtype="<f4").reshape(n_vert, n_props)
    fdata = np.frombuffer(body[vbytes:], dtype=np.uint8)
    faces = np.zeros((n_face, 3), dtype=np.int64)
    o = 0
    for i in range(n_face):
        k = int(fdata[o])
        faces[i] = np.frombuffer(fdata[o + 1:o + 1 + 4 * k].tobytes(),
                                 dtype="<i4")[:3]
        o += 1 + 4 * k
    verts = vdata[:, :3].astype(np.float64)
    normals = vdata[:, 3:6].astype(np.float64) if n_props >= 6 else None
    return Mesh(verts, faces), normals


def save_obj(path, mesh, normals=None):
    lines = []
    for p in mesh.vertices:
        lines.append(f"v {p[0]:.8g} {p[1]:.8g} {p[2]:.8g}")
    if normals is not None:
        for nv in normals:
            lines.append(f"vn {nv[0]:.8g} {nv[1]:.8g} {nv[2]:.8g}")
        for a, b, c in mesh.faces + 1:
            lines.append(f"f {a}//{a} {b}//{b} {c}//{c}")
    else:
        for a, b, c in mesh.faces + 1:
            lines.append(f"f {a} {b} {c}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
