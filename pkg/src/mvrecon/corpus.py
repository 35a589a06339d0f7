"""Procedural shape corpus with exact signed-distance oracles.

Every shape is centered at the origin of its object frame and fits the
cube [-1, 1]^3 with margin. Signed distances are negative inside and
all primitives have closed-form exact SDFs; the rounded-box family
morphs continuously between box and sphere, which keeps ground truth
exact while still spanning a useful range of convex shapes. Unions use
the min of member SDFs (exact near the surface away from seams, correct
sign everywhere).
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml


class Primitive:
    """Base class: exact SDF plus a uniform surface sampler."""

    def sdf(self, points):
        raise NotImplementedError

    def sample_surface(self, n, rng):
        raise NotImplementedError

    def surface_area(self):
        raise NotImplementedError

    def sdf_gradient(self, points, h=1e-6):
        """Central-difference SDF gradient; exact enough for shading."""
        p = np.atleast_2d(points)
        g = np.empty_like(p)
        for k in range(3):
            dp = np.zeros(3)
            dp[k] = h
            g[:, k] = (self.sdf(p + dp) - self.sdf(p - dp)) / (2 * h)
        return g

    def params(self):
        raise NotImplementedError


@dataclass
class Sphere(Primitive):
    radius: float

    def sdf(self, points):
        p = np.atleast_2d(points)
        return np.linalg.norm(p, axis=1) - self.radius

    def surface_area(self):
        return 4 * np.pi * self.radius ** 2

    def sample_surface(self, n, rng):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.radius * d

    def params(self):
        return {"kind": "sphere", "radius": self.radius}


@dataclass
class RoundedBox(Primitive):
    """Box with half extents `half_extents`, edges rounded by `rounding`.

    rounding = 0 is a sharp box; rounding -> min(half_extents) tends to
    an ellipsoid-like blob. The overall half reach is
    half_extents + rounding per axis.
    """

    half_extents: np.ndarray
    rounding: float = 0.0

    def __post_init__(self):
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64)

    def sdf(self, points):
        p = np.atleast_2d(points)
        q = np.abs(p) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside - self.rounding

    def surface_area(self):
        b, r = self.half_extents, self.rounding
        flat = 8 * (b[0] * b[1] + b[1] * b[2] + b[2] * b[0])
        edges = 4 * np.pi * r * b.sum()
        corners = 4 * np.pi * r ** 2
        return flat + edges + corners

    def _sample_faces(self, n, rng):
        b, r = self.half_extents, self.rounding
        face_areas = np.repeat([4 * b[1] * b[2], 4 * b[2] * b[0],
                                4 * b[0] * b[1]], 2)
        axes = np.repeat([0, 1, 2], 2)
        signs = np.tile([-1.0, 1.0], 3)
        pick = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * b
        pts[np.arange(n), axes[pick]] = signs[pick] * (b[axes[pick]] + r)
        return pts

    def _sample_edges(self, n, rng):
        b, r = self.half_extents, self.rounding
        axis = rng.choice(3, size=n, p=b / b.sum())
        u, v = (axis + 1) % 3, (axis + 2) % 3
        su = rng.choice([-1.0, 1.0], size=n)
        sv = rng.choice([-1.0, 1.0], size=n)
        phi = rng.uniform(0.0, 0.5 * np.pi, size=n)
        pts = np.empty((n, 3))
        idx = np.arange(n)
        pts[idx, axis] = rng.uniform(-1.0, 1.0, size=n) * b[axis]
        pts[idx, u] = su * (b[u] + r * np.cos(phi))
        pts[idx, v] = sv * (b[v] + r * np.sin(phi))
        return pts

    def _sample_corners(self, n, rng):
        b, r = self.half_extents, self.rounding
        d = np.abs(rng.normal(size=(n, 3)))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        signs = rng.choice([-1.0, 1.0], size=(n, 3))
        return signs * (b + r * d)

    def sample_surface(self, n, rng):
        b, r = self.half_extents, self.rounding
        flat = 8 * (b[0] * b[1] + b[1] * b[2] + b[2] * b[0])
        edges = 4 * np.pi * r * b.sum()
        corners = 4 * np.pi * r ** 2
        counts = rng.multinomial(n, np.array([flat, edges, corners]) /
                                 (flat + edges + corners))
        parts = [self._sample_faces(counts[0], rng)]
        if counts[1]:
            parts.append(self._sample_edges(counts[1], rng))
        if counts[2]:
            parts.append(self._sample_corners(counts[2], rng))
        out = np.concatenate(parts, axis=0)
        return out[rng.permutation(n)]

    def params(self):
        return {"kind": "rounded_box",
                "half_extents": [float(v) for v in self.half_extents],
                "rounding": float(self.rounding)}


@dataclass
class Cylinder(Primitive):
    """Capped cylinder along z."""

    radius: float
    half_height: float

    def sdf(self, points):
        p = np.atleast_2d(points)
        dr = np.linalg.norm(p[:, :2], axis=1) - self.radius
        dz = np.abs(p[:, 2]) - self.half_height
        d = np.stack([dr, dz], axis=1)
        return (np.minimum(d.max(axis=1), 0.0)
                + np.linalg.norm(np.maximum(d, 0.0), axis=1))

    def surface_area(self):
        return (4 * np.pi * self.radius * self.half_height
                + 2 * np.pi * self.radius ** 2)

    def sample_surface(self, n, rng):
        side = 4 * np.pi * self.radius * self.half_height
        caps = 2 * np.pi * self.radius ** 2
        n_side = rng.binomial(n, side / (side + caps))
        phi = rng.uniform(0, 2 * np.pi, size=n)
        pts = np.empty((n, 3))
        pts[:n_side, 0] = self.radius * np.cos(phi[:n_side])
        pts[:n_side, 1] = self.radius * np.sin(phi[:n_side])
        pts[:n_side, 2] = rng.uniform(-1, 1, size=n_side) * self.half_height
        rad = self.radius * np.sqrt(rng.uniform(size=n - n_side))
        pts[n_side:, 0] = rad * np.cos(phi[n_side:])
        pts[n_side:, 1] = rad * np.sin(phi[n_side:])
        pts[n_side:, 2] = (rng.choice([-1.0, 1.0], size=n - n_side)
                           * self.half_height)
        return pts[rng.permutation(n)]

    def params(self):
        return {"kind": "cylinder", "radius": float(self.radius),
                "half_height": float(self.half_height)}


@dataclass
class Capsule(Primitive):
    """Sphere-capped segment along z."""

    radius: float
    half_height: float

    def sdf(self, points):
        p = np.atleast_2d(points).copy()
        p[:, 2] -= np.clip(p[:, 2], -self.half_height, self.half_height)
        return np.linalg.norm(p, axis=1) - self.radius

    def surface_area(self):
        return (4 * np.pi * self.radius * self.half_height
                + 4 * np.pi * self.radius ** 2)

    def sample_surface(self, n, rng):
        side = 4 * np.pi * self.radius * self.half_height
        caps = 4 * np.pi * self.radius ** 2
        n_side = rng.binomial(n, side / (side + caps))
        pts = np.empty((n, 3))
        phi = rng.uniform(0, 2 * np.pi, size=n_side)
        pts[:n_side, 0] = self.radius * np.cos(phi)
        pts[:n_side, 1] = self.radius * np.sin(phi)
        pts[:n_side, 2] = rng.uniform(-1, 1, size=n_side) * self.half_height
        d = rng.normal(size=(n - n_side, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts[n_side:] = self.radius * d
        pts[n_side:, 2] += np.sign(d[:, 2]) * self.half_height
        return pts[rng.permutation(n)]

    def params(self):
        return {"kind": "capsule", "radius": float(self.radius),
                "half_height": float(self.half_height)}


@dataclass
class Offset(Primitive):
    """A primitive rigidly shifted by `offset` (no rotation)."""

    base: Primitive
    offset: np.ndarray

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=np.float64)

    def sdf(self, points):
        return self.base.sdf(np.atleast_2d(points) - self.offset)

    def surface_area(self):
        return self.base.surface_area()

    def sample_surface(self, n, rng):
        return self.base.sample_surface(n, rng) + self.offset

    def params(self):
        p = self.base.params()
        p["offset"] = [float(v) for v in self.offset]
        return p


@dataclass
class Union(Primitive):
    """min-combination of two primitives.

    The sampler draws from member surfaces proportionally to area and
    rejects points strictly inside the other member, so emitted samples
    lie exactly on the union boundary.
    """

    a: Primitive
    b: Primitive

    def sdf(self, points):
        return np.minimum(self.a.sdf(points), self.b.sdf(points))

    def surface_area(self):
        # upper bound; good enough to weight the sampler
        return self.a.surface_area() + self.b.surface_area()

    def sample_surface(self, n, rng):
        out = np.empty((0, 3))
        wa = self.a.surface_area()
        pa = wa / (wa + self.b.surface_area())
        while len(out) < n:
            m = max(2 * (n - len(out)), 64)
            na = rng.binomial(m, pa)
            cand = np.concatenate([self.a.sample_surface(na, rng),
                                   self.b.sample_surface(m - na, rng)])
            keep = self.sdf(cand) > -1e-12
            out = np.concatenate([out, cand[keep]])
        return out[:n]

    def params(self):
        return {"kind": "union", "a": self.a.params(), "b": self.b.params()}


def primitive_from_params(p):
    kind = p["kind"]
    if kind == "sphere":
        prim = Sphere(p["radius"])
    elif kind == "rounded_box":
        prim = RoundedBox(np.asarray(p["half_extents"]), p["rounding"])
    elif kind == "cylinder":
        prim = Cylinder(p["radius"], p["half_height"])
    elif kind == "capsule":
        prim = Capsule(p["radius"], p["half_height"])
    elif kind == "union":
        return Union(primitive_from_params(p["a"]),
                     primitive_from_params(p["b"]))
    else:
        raise ValueError(f"unknown primitive kind {kind!r}")
    if "offset" in p:
        return Offset(prim, np.asarray(p["offset"]))
    return prim


@dataclass
class CorpusShape:
    """One corpus entry: exact geometry plus (optionally) a trained code."""

    shape_id: int
    primitive: Primitive
    code: np.ndarray | None = None

    def sdf(self, points):
        return self.primitive.sdf(points)

    def sdf_gradient(self, points):
        return self.primitive.sdf_gradient(points)

    def sample_surface(self, n, rng):
        return self.primitive.sample_surface(n, rng)


MAX_REACH = 0.85  # shapes stay inside [-MAX_REACH, MAX_REACH]^3


def _random_rounded_box(rng):
    b = rng.uniform(0.2, 0.62, size=3)
    r = rng.uniform(0.02, 0.2)
    scale = min(1.0, MAX_REACH / (b + r).max())
    return RoundedBox(b * scale, r * scale)


def _random_cylinder(rng):
    rad = rng.uniform(0.2, 0.5)
    hh = rng.uniform(0.3, 0.8)
    scale = min(1.0, MAX_REACH / max(rad, hh))
    return Cylinder(rad * scale, hh * scale)


def _random_capsule(rng):
    rad = rng.uniform(0.18, 0.4)
    hh = rng.uniform(0.2, 0.55)
    scale = min(1.0, MAX_REACH / (rad + hh))
    return Capsule(rad * scale, hh * scale)


def _random_union(rng):
    a = RoundedBox(rng.uniform(0.18, 0.42, size=3), rng.uniform(0.0, 0.08))
    b_kind = rng.choice(["cylinder", "sphere", "rounded_box"])
    if b_kind == "cylinder":
        b = Cylinder(rng.uniform(0.12, 0.3), rng.uniform(0.25, 0.6))
    elif b_kind == "sphere":
        b = Sphere(rng.uniform(0.2, 0.42))
    else:
        b = RoundedBox(rng.uniform(0.15, 0.4, size=3), rng.uniform(0.0, 0.1))
    off = rng.uniform(-0.3, 0.3, size=3)
    # require overlap so the union stays one connected component
    mid = Offset(b, off)
    if mid.sdf(np.zeros((1, 3)))[0] > -0.05:
        off *= 0.4
        mid = Offset(b, off)
    return Union(a, mid)


def generate_corpus(n_shapes, seed=0):
    """Deterministic list of `n_shapes` procedural shapes."""
    rng = np.random.default_rng(seed)
    makers = [_random_rounded_box, _random_cylinder, _random_capsule,
              lambda r: Sphere(r.uniform(0.35, 0.75)), _random_union]
    shapes = []
    for i in range(n_shapes):
        prim = makers[i % len(makers)](rng)
        shapes.append(CorpusShape(i, prim))
    return shapes


# ---------------------------------------------------------------------------
# corpus spec files (TOML)


def _toml_value(v):
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, dict):
        items = ", ".join(f"{k} = {_toml_value(x)}" for k, x in v.items())
        return "{" + items + "}"
    raise TypeError(f"cannot serialize {type(v)} to TOML")


def save_corpus_spec(path, shapes, seed=None):
    """Write a corpus spec TOML listing primitive parameters."""
    lines = ["[corpus]"]
    if seed is not None:
        lines.append(f"seed = {int(seed)}")
    lines.append(f"n_shapes = {len(shapes)}")
    for s in shapes:
        lines.append("")
        lines.append("[[shape]]")
        lines.append(f"id = {s.shape_id}")
        for k, v in s.primitive.params().items():
            lines.append(f"{k} = {_toml_value(v)}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_corpus_spec(path):
    """Read a corpus spec TOML back into CorpusShape objects."""
    with open(path, "rb") as f:
        doc = _toml.load(f)
    shapes = []
    for entry in doc.get("shape", []):
        params = {k: v for k, v in entry.items() if k != "id"}
        shapes.append(CorpusShape(int(entry["id"]),
                                  primitive_from_params(params)))
    return shapes


def sample_sdf_points(shape, n, rng, near_frac=0.7, near_sigma=0.04,
                      domain=1.0):
    """Training samples: mixture of near-surface and uniform volume points.

    Returns (points (n, 3), sdf values (n,)).
    """
    n_near = int(round(n * near_frac))
    surf = shape.sample_surface(n_near, rng)
    pts_near = surf + rng.normal(scale=near_sigma, size=surf.shape)
    pts_uni = rng.uniform(-domain, domain, size=(n - n_near, 3))
    pts = np.concatenate([pts_near, pts_uni])
    return pts, shape.sdf(pts)
