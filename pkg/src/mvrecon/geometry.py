"""Cameras, similarity transforms, rays, and 2D/3D boxes.

Conventions used throughout the library:

* world and camera frames are right handed; camera looks down +z with
  x right and y down (standard computer vision frame),
* image coordinates are (u, v) with pixel centers at integer
  coordinates and the origin at the top-left pixel center,
* quaternions are stored as (w, x, y, z) and kept unit length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera

_UNIT_TOL = 1e-9


def _as_readonly(a, shape, name):
    out = np.array(a, dtype=np.float64).reshape(shape)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} must be finite")
    out.flags.writeable = False
    return out


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    return q / n


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    """3x3 rotation matrix of a unit quaternion."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_axis_angle(axis_angle):
    """Exponential map: rotation vector (3,) -> unit quaternion."""
    v = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(v)
    if theta < 1e-12:
        # first-order expansion keeps the map smooth through zero
        q = np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]])
        return quat_normalize(q)
    axis = v / theta
    half = 0.5 * theta
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def matrix_to_quat(m):
    """Rotation matrix -> unit quaternion (w >= 0)."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(m[i, i] - m[j, j] - m[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimilarityTransform:
    """7-DoF similarity: x -> scale * R(rotation) x + translation."""

    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray  # (3,)
    scale: float = 1.0

    def __post_init__(self):
        q = np.array(self.rotation, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError("rotation quaternion must be unit length")
        q = quat_normalize(q)
        if q[0] < 0:
            q = -q
        q.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation",
                           _as_readonly(self.translation, (3,), "translation"))
        s = float(self.scale)
        if not (np.isfinite(s) and s > 0):
            raise ValueError("scale must be positive")
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3), 1.0)

    @classmethod
    def from_rotation_matrix(cls, m, translation=(0, 0, 0), scale=1.0):
        return cls(matrix_to_quat(m), np.asarray(translation, float), scale)

    @property
    def rotation_matrix(self):
        return quat_to_matrix(self.rotation)

    def apply(self, points):
        """Transform points of shape (3,) or (n, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p @ self.rotation_matrix.T) + self.translation

    def inverse(self):
        qi = quat_conjugate(self.rotation)
        ri = quat_to_matrix(qi)
        return SimilarityTransform(qi, -(ri @ self.translation) / self.scale,
                                   1.0 / self.scale)

    def compose(self, other):
        """self o other: apply `other` first, then `self`."""
        q = quat_multiply(self.rotation, other.rotation)
        t = self.apply(other.translation)
        return SimilarityTransform(quat_normalize(q), t,
                                   self.scale * other.scale)

    def matrix(self):
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    def perturbed(self, tangent):
        """Right-translated tangent update.

        ``tangent`` is (omega(3), nu(3), log_scale(1)); rotation is
        updated on the left, translation additively, scale
        multiplicatively. Used by the optimizer and its FD audits.
        """
        d = np.asarray(tangent, dtype=np.float64).reshape(7)
        q = quat_multiply(quat_from_axis_angle(d[0:3]), self.rotation)
        return SimilarityTransform(quat_normalize(q),
                                   self.translation + d[3:6],
                                   self.scale * float(np.exp(d[6])))


@dataclass(frozen=True)
class PinholeCamera:
    """Calibrated pinhole camera with a rigid world-from-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose_world_from_cam: SimilarityTransform = field(
        default_factory=SimilarityTransform.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")
        if abs(self.pose_world_from_cam.scale - 1.0) > 1e-9:
            raise ValueError("camera pose must have unit scale")

    @property
    def center(self):
        """Camera center in world coordinates."""
        return self.pose_world_from_cam.translation

    def world_to_cam(self, points):
        return self.pose_world_from_cam.inverse().apply(points)

    def cam_to_world(self, points):
        return self.pose_world_from_cam.apply(points)

    def project_cam(self, points_cam):
        """Camera-frame points -> (uv (n,2), depth (n,))."""
        p = np.atleast_2d(np.asarray(points_cam, dtype=np.float64))
        z = p[:, 2]
        uv = np.empty((len(p), 2))
        with np.errstate(divide="ignore", invalid="ignore"):
            uv[:, 0] = self.fx * p[:, 0] / z + self.cx
            uv[:, 1] = self.fy * p[:, 1] / z + self.cy
        return uv, z

    def project(self, points_world):
        """World points -> (uv (n,2), depth (n,)). Depth may be <= 0."""
        return self.project_cam(self.world_to_cam(np.atleast_2d(points_world)))

    def backproject(self, uv):
        """Pixel -> unit ray direction in world coordinates."""
        u, v = float(uv[0]), float(uv[1])
        d_cam = np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
        d_world = self.pose_world_from_cam.rotation_matrix @ d_cam
        return d_world / np.linalg.norm(d_world)


@dataclass(frozen=True)
class BBox2:
    """Axis-aligned 2D box in pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("degenerate 2D box")

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return np.array([0.5 * (self.x_min + self.x_max),
                         0.5 * (self.y_min + self.y_max)])

    def clipped(self, width, height):
        """Clip to image bounds [0, width-1] x [0, height-1]."""
        return BBox2(max(self.x_min, 0.0), max(self.y_min, 0.0),
                     min(self.x_max, width - 1.0), min(self.y_max, height - 1.0))


def iou_2d(a: BBox2, b: BBox2) -> float:
    """Intersection-over-union of two 2D boxes, in [0, 1]."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class BBox3:
    """Oriented 3D box: center, half extents, and orientation quaternion."""

    center: np.ndarray
    half_extents: np.ndarray
    orientation: np.ndarray = field(
        default_factory=lambda: np.array([1.0, 0, 0, 0]))

    def __post_init__(self):
        object.__setattr__(self, "center",
                           _as_readonly(self.center, (3,), "center"))
        he = _as_readonly(self.half_extents, (3,), "half_extents")
        if not np.all(he > 0):
            raise ValueError("half extents must be positive")
        object.__setattr__(self, "half_extents", he)
        q = quat_normalize(np.array(self.orientation, dtype=np.float64))
        q.flags.writeable = False
        object.__setattr__(self, "orientation", q)

    def corners(self):
        """The 8 corners, shape (8, 3), in world coordinates."""
        signs = np.array([[sx, sy, sz] for sx in (-1, 1)
                          for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        local = signs * self.half_extents
        return local @ quat_to_matrix(self.orientation).T + self.center

    def inflated(self, margin):
        return BBox3(self.center, self.half_extents + margin, self.orientation)

    def contains(self, points):
        """Boolean mask of points inside the (oriented) box."""
        p = np.atleast_2d(points) - self.center
        local = p @ quat_to_matrix(self.orientation)
        return np.all(np.abs(local) <= self.half_extents, axis=1)


def project_bbox3(bb: BBox3, cam: PinholeCamera) -> BBox2:
    """Project a 3D box and bound its corners by an image-clipped 2D box.

    Raises :class:`BehindCamera` if any corner has non-positive depth.
    """
    uv, z = cam.project(bb.corners())
    if np.any(z <= 0):
        raise BehindCamera("3D box corner at non-positive depth")
    box = BBox2(uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max(), uv[:, 1].max())
    return box.clipped(cam.width, cam.height)


def center_ray(det: BBox2, cam: PinholeCamera) -> "Ray":
    """Ray from the camera center through the detection box center."""
    d = cam.backproject(det.center)
    return Ray(cam.center, d)


@dataclass(frozen=True)
class Ray:
    """Unit-direction ray; with finite bounds it doubles as a segment."""

    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = np.inf

    def __post_init__(self):
        object.__setattr__(self, "origin",
                           _as_readonly(self.origin, (3,), "origin"))
        d = np.array(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-6:
            raise ValueError("direction must be unit length")
        d /= n
        d.flags.writeable = False
        object.__setattr__(self, "direction", d)
        if not self.t_min < self.t_max:
            raise ValueError("require t_min < t_max")

    def point_at(self, t):
        return self.origin + np.multiply.outer(np.asarray(t, float),
                                               self.direction)


@dataclass(frozen=True)
class LineSegment(Ray):
    """Bounded ray; t_max must be finite."""

    def __post_init__(self):
        super().__post_init__()
        if not np.isfinite(self.t_max):
            raise ValueError("segment needs a finite t_max")

    @property
    def midpoint(self):
        return self.point_at(0.5 * (self.t_min + self.t_max))

    @property
    def endpoints(self):
        return self.point_at(self.t_min), self.point_at(self.t_max)


def point_segment_distance(p, seg: LineSegment) -> float:
    """Euclidean distance from a point to the clamped segment."""
    t = float(np.dot(np.asarray(p, float) - seg.origin, seg.direction))
    t = min(max(t, seg.t_min), seg.t_max)
    return float(np.linalg.norm(seg.point_at(t) - p))


def points_segment_distances(points, seg: LineSegment):
    """Vectorized :func:`point_segment_distance` over (n, 3) points."""
    p = np.atleast_2d(points)
    t = (p - seg.origin) @ seg.direction
    t = np.clip(t, seg.t_min, seg.t_max)
    feet = seg.origin + t[:, None] * seg.direction
    return np.linalg.norm(p - feet, axis=1)
